//! Encoder-decoder segmentation networks (guided teacher, single-output
//! and dual-output students) built from a declarative [`ModelSpec`].
//!
//! Layout per level `l` with `c_l = base_channels * 2^l`:
//!
//! * encoder: level 0 is a conv block `in -> c_0`; deeper levels apply a
//!   3×3×3 stride-2 convolution `c_{l-1} -> c_l` followed by a conv block;
//! * decoder (one per head): upsample `c_{l+1} -> c_l`, concatenate the
//!   encoder skip, conv block `2 c_l -> c_l`;
//! * head: 1×1×1 convolution to one channel and a logistic sigmoid. Head
//!   outputs are concatenated channel-wise.
//!
//! A conv block is two 3×3×3 convolutions, each followed by a PReLU.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::nn::{sigmoid_backward, sigmoid_forward, Conv3d, PRelu, Param, Tensor, UpConv3d};
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    #[default]
    Transposed,
    /// Nearest-neighbour 2× upsampling followed by a 3×3×3 convolution.
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub heads: usize,
    #[serde(default)]
    pub upsampling: Upsampling,
    pub seed: u64,
}

impl ModelSpec {
    /// Guided teacher: CT patch + guidance channel, three downsamplings.
    pub fn teacher() -> Self {
        ModelSpec {
            levels: 3,
            base_channels: 16,
            in_channels: 2,
            heads: 1,
            upsampling: Upsampling::Transposed,
            seed: 0,
        }
    }

    pub fn so_student() -> Self {
        ModelSpec {
            levels: 4,
            in_channels: 1,
            ..ModelSpec::teacher()
        }
    }

    pub fn do_student() -> Self {
        ModelSpec {
            heads: 2,
            ..ModelSpec::so_student()
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(invalid!("levels must be in 1..=8, got {}", self.levels));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if !(1..=2).contains(&self.heads) {
            return Err(invalid!("heads must be 1 or 2, got {}", self.heads));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial multiple every input extent must be divisible by.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, channels: usize, dims: Shape3) -> Result<()> {
        if channels != self.in_channels {
            return Err(invalid!(
                "model expects {} input channels, got {channels}",
                self.in_channels
            ));
        }
        let d = self.divisor();
        for (axis, &n) in ["X", "Y", "Z"].iter().zip(&dims) {
            if n == 0 || n % d != 0 {
                return Err(invalid!(
                    "{axis} extent {n} is not divisible by {d} (2^{} levels)",
                    self.levels
                ));
            }
        }
        Ok(())
    }

    /// Spatial extent of the deepest feature map for a given input.
    pub fn deepest_dims(&self, dims: Shape3) -> Shape3 {
        dims.map(|n| n >> self.levels)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv3d,
    act1: PRelu,
    conv2: Conv3d,
    act2: PRelu,
}

struct BlockTape {
    x: Tensor,
    c1: Tensor,
    a1: Tensor,
    c2: Tensor,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv3d::new(cin, cout, 3, 1, 1, PRelu::INIT_SLOPE, rng),
            act1: PRelu::new(cout),
            conv2: Conv3d::new(cout, cout, 3, 1, 1, PRelu::INIT_SLOPE, rng),
            act2: PRelu::new(cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let a1 = self.act1.forward(&self.conv1.forward(x));
        self.act2.forward(&self.conv2.forward(&a1))
    }

    fn forward_tape(&self, x: Tensor) -> (Tensor, BlockTape) {
        let c1 = self.conv1.forward(&x);
        let a1 = self.act1.forward(&c1);
        let c2 = self.conv2.forward(&a1);
        let out = self.act2.forward(&c2);
        (out, BlockTape { x, c1, a1, c2 })
    }

    fn backward(
        &mut self,
        tape: &BlockTape,
        dout: Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let dc2 = self.act2.backward(&tape.c2, dout);
        let da1 = self
            .conv2
            .backward(&tape.a1, &dc2, true)
            .expect("input grad requested");
        let dc1 = self.act1.backward(&tape.c1, da1);
        self.conv1.backward(&tape.x, &dc1, need_input_grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.conv1.params_mut());
        v.push(&mut self.act1.alpha);
        v.extend(self.conv2.params_mut());
        v.push(&mut self.act2.alpha);
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        v.extend(self.conv1.params());
        v.push(&self.act1.alpha);
        v.extend(self.conv2.params());
        v.push(&self.act2.alpha);
        v
    }
}

#[derive(Debug, Clone)]
enum Upsampler {
    Transposed(UpConv3d),
    NearestConv(Conv3d),
}

fn nearest_upsample(x: &Tensor) -> Tensor {
    let [nx, ny, nz] = x.dims;
    let mut y = Tensor::zeros(x.channels, [2 * nx, 2 * ny, 2 * nz]);
    let n_out = y.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut y.data[c * n_out..(c + 1) * n_out];
        for ox in 0..2 * nx {
            for oy in 0..2 * ny {
                for oz in 0..2 * nz {
                    dst[(ox * 2 * ny + oy) * 2 * nz + oz] =
                        src[((ox / 2) * ny + oy / 2) * nz + oz / 2];
                }
            }
        }
    }
    y
}

/// Adjoint of [`nearest_upsample`]: sums each 2×2×2 block.
fn nearest_upsample_backward(dy: &Tensor) -> Tensor {
    let [nx, ny, nz] = dy.dims.map(|n| n / 2);
    let mut dx = Tensor::zeros(dy.channels, [nx, ny, nz]);
    let n_in = dx.voxels();
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * n_in..(c + 1) * n_in];
        for ox in 0..2 * nx {
            for oy in 0..2 * ny {
                for oz in 0..2 * nz {
                    dst[((ox / 2) * ny + oy / 2) * nz + oz / 2] +=
                        src[(ox * 2 * ny + oy) * 2 * nz + oz];
                }
            }
        }
    }
    dx
}

impl Upsampler {
    fn new(kind: Upsampling, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            Upsampling::Transposed => {
                Upsampler::Transposed(UpConv3d::new(cin, cout, PRelu::INIT_SLOPE, rng))
            }
            Upsampling::NearestConv => {
                Upsampler::NearestConv(Conv3d::new(cin, cout, 3, 1, 1, PRelu::INIT_SLOPE, rng))
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Upsampler::Transposed(up) => up.forward(x),
            Upsampler::NearestConv(conv) => conv.forward(&nearest_upsample(x)),
        }
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        match self {
            Upsampler::Transposed(up) => up.backward(x, dy),
            Upsampler::NearestConv(conv) => {
                let up = nearest_upsample(x);
                let d = conv.backward(&up, dy, true).expect("input grad requested");
                nearest_upsample_backward(&d)
            }
        }
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        match self {
            Upsampler::Transposed(up) => up.params_mut(),
            Upsampler::NearestConv(conv) => conv.params_mut(),
        }
    }

    fn params(&self) -> [&Param; 2] {
        match self {
            Upsampler::Transposed(up) => up.params(),
            Upsampler::NearestConv(conv) => conv.params(),
        }
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    /// `ups[l]`: `c_{l+1} -> c_l`
    ups: Vec<Upsampler>,
    /// `blocks[l]`: `2 c_l -> c_l`
    blocks: Vec<ConvBlock>,
    head: Conv3d,
}

struct DecoderTape {
    up_in: Vec<Tensor>,
    blocks: Vec<Option<BlockTape>>,
    features: Tensor,
    prob: Tensor,
}

/// Activations recorded by [`UNet::forward_train`] for one sample.
pub struct Tape {
    enc: Vec<BlockTape>,
    skips: Vec<Tensor>,
    dec: Vec<DecoderTape>,
    output: Tensor,
}

impl Tape {
    /// Network output, `heads` channels of probabilities.
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: ModelSpec,
    enc: Vec<ConvBlock>,
    down: Vec<Conv3d>,
    decoders: Vec<Decoder>,
}

/// Builds a freshly initialized network for `spec`.
pub fn build_model(spec: &ModelSpec) -> Result<UNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = |l: usize| spec.channels_at(l);
    let mut enc = vec![ConvBlock::new(spec.in_channels, c(0), &mut rng)];
    let mut down = Vec::new();
    for l in 1..=spec.levels {
        down.push(Conv3d::new(
            c(l - 1),
            c(l),
            3,
            2,
            1,
            PRelu::INIT_SLOPE,
            &mut rng,
        ));
        enc.push(ConvBlock::new(c(l), c(l), &mut rng));
    }
    let decoders = (0..spec.heads)
        .map(|_| Decoder {
            ups: (0..spec.levels)
                .map(|l| Upsampler::new(spec.upsampling, c(l + 1), c(l), &mut rng))
                .collect(),
            blocks: (0..spec.levels)
                .map(|l| ConvBlock::new(2 * c(l), c(l), &mut rng))
                .collect(),
            head: Conv3d::new(c(0), 1, 1, 1, 0, 1.0, &mut rng),
        })
        .collect();
    Ok(UNet {
        spec: spec.clone(),
        enc,
        down,
        decoders,
    })
}

impl UNet {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Forward pass over a batch; each sample yields a `heads`-channel
    /// probability map of the input's spatial size.
    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        batch.iter().map(|x| self.forward_one(x)).collect()
    }

    pub fn forward_one(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_input(x.channels, x.dims)?;
        let levels = self.spec.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.enc[0].forward(x);
        for l in 1..=levels {
            let d = self.down[l - 1].forward(&h);
            skips.push(h);
            h = self.enc[l].forward(&d);
        }
        let bottom = h;
        let mut out: Option<Tensor> = None;
        for dec in &self.decoders {
            let mut h = dec.ups[levels - 1].forward(&bottom);
            h = dec.blocks[levels - 1].forward(&Tensor::concat(&h, &skips[levels - 1]));
            for l in (0..levels - 1).rev() {
                let up = dec.ups[l].forward(&h);
                h = dec.blocks[l].forward(&Tensor::concat(&up, &skips[l]));
            }
            let p = sigmoid_forward(&dec.head.forward(&h));
            out = Some(match out {
                None => p,
                Some(prev) => Tensor::concat(&prev, &p),
            });
        }
        Ok(out.expect("at least one head"))
    }

    /// Forward pass that records the activations needed by
    /// [`UNet::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Result<Tape> {
        self.spec.check_input(x.channels, x.dims)?;
        let levels = self.spec.levels;
        let mut enc = Vec::with_capacity(levels + 1);
        let mut skips = Vec::with_capacity(levels + 1);
        let (mut h, t) = self.enc[0].forward_tape(x.clone());
        enc.push(t);
        for l in 1..=levels {
            let d = self.down[l - 1].forward(&h);
            skips.push(h);
            let (o, t) = self.enc[l].forward_tape(d);
            enc.push(t);
            h = o;
        }
        skips.push(h);

        let mut dec_tapes = Vec::with_capacity(self.decoders.len());
        let mut output: Option<Tensor> = None;
        for dec in &self.decoders {
            let mut up_in: Vec<Tensor> = (0..levels).map(|_| Tensor::zeros(0, [0; 3])).collect();
            let mut blocks: Vec<Option<BlockTape>> = (0..levels).map(|_| None).collect();
            let mut h = skips[levels].clone();
            for l in (0..levels).rev() {
                let up = dec.ups[l].forward(&h);
                up_in[l] = h;
                let (o, t) = dec.blocks[l].forward_tape(Tensor::concat(&up, &skips[l]));
                blocks[l] = Some(t);
                h = o;
            }
            let prob = sigmoid_forward(&dec.head.forward(&h));
            output = Some(match output {
                None => prob.clone(),
                Some(prev) => Tensor::concat(&prev, &prob),
            });
            dec_tapes.push(DecoderTape {
                up_in,
                blocks,
                features: h,
                prob,
            });
        }
        Ok(Tape {
            enc,
            skips,
            dec: dec_tapes,
            output: output.expect("at least one head"),
        })
    }

    /// Back-propagates `d_output` (gradient of the loss with respect to the
    /// probability output) and accumulates parameter gradients.
    pub fn backward(&mut self, tape: &Tape, d_output: &Tensor) -> Result<()> {
        if d_output.dims != tape.output.dims || d_output.channels != tape.output.channels {
            return Err(invalid!(
                "output gradient shape does not match the forward pass"
            ));
        }
        let levels = self.spec.levels;
        let mut d_enc: Vec<Option<Tensor>> = (0..=levels).map(|_| None).collect();
        let add = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            None => *slot = Some(g),
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        };

        for (h, (dec, dt)) in self.decoders.iter_mut().zip(&tape.dec).enumerate() {
            let dp = Tensor::from_vec(1, d_output.dims, d_output.channel(h).to_vec())?;
            let dlogit = sigmoid_backward(&dt.prob, dp);
            let mut d = dec
                .head
                .backward(&dt.features, &dlogit, true)
                .expect("input grad requested");
            for l in 0..levels {
                let bt = dt.blocks[l].as_ref().expect("decoder tape filled");
                let dcat = dec.blocks[l]
                    .backward(bt, d, true)
                    .expect("input grad requested");
                let c = self.spec.channels_at(l);
                let (dup, dskip) = dcat.split_channels(c);
                add(&mut d_enc[l], dskip);
                d = dec.ups[l].backward(&dt.up_in[l], &dup);
            }
            add(&mut d_enc[levels], d);
        }

        for l in (0..=levels).rev() {
            let d = d_enc[l].take().expect("every level receives a gradient");
            let need = l > 0;
            let dx = self.enc[l].backward(&tape.enc[l], d, need);
            if l > 0 {
                let dd = self.down[l - 1]
                    .backward(&tape.skips[l - 1], &dx.expect("input grad requested"), true)
                    .expect("input grad requested");
                add(&mut d_enc[l - 1], dd);
            }
        }
        Ok(())
    }

    /// Parameters in a fixed traversal order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for b in &mut self.enc {
            v.extend(b.params_mut());
        }
        for d in &mut self.down {
            v.extend(d.params_mut());
        }
        for dec in &mut self.decoders {
            for u in &mut dec.ups {
                v.extend(u.params_mut());
            }
            for b in &mut dec.blocks {
                v.extend(b.params_mut());
            }
            v.extend(dec.head.params_mut());
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for b in &self.enc {
            v.extend(b.params());
        }
        for d in &self.down {
            v.extend(d.params());
        }
        for dec in &self.decoders {
            for u in &dec.ups {
                v.extend(u.params());
            }
            for b in &dec.blocks {
                v.extend(b.params());
            }
            v.extend(dec.head.params());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Flattened copy of every parameter value.
    pub fn parameter_vector(&self) -> Vec<f32> {
        self.params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn gradient_vector(&self) -> Vec<f32> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn load_parameter_vector(&mut self, values: &[f32]) -> Result<()> {
        let expected = count_parameters(self);
        if values.len() != expected {
            return Err(invalid!(
                "parameter vector has {} values, model needs {expected}",
                values.len()
            ));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

pub fn count_parameters(model: &UNet) -> usize {
    model.params().iter().map(|p| p.len()).sum()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSEGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    /// Hash of the pipeline configuration the model was trained under.
    pub config_hash: String,
    pub parameter_count: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Serialized model: header JSON followed by little-endian f32 parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub parameters: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(
        model: &UNet,
        config_hash: impl Into<String>,
        metadata: serde_json::Value,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                spec: model.spec.clone(),
                config_hash: config_hash.into(),
                parameter_count: count_parameters(model),
                metadata,
            },
            parameters: model.parameter_vector(),
        }
    }

    pub fn to_model(&self) -> Result<UNet> {
        let mut model = build_model(&self.header.spec)?;
        model.load_parameter_vector(&self.parameters)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.parameters.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.parameters {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, e))?;
        let payload = &bytes[20 + hlen..];
        if payload.len() != 4 * header.parameter_count {
            return Err(bad("parameter payload length does not match header"));
        }
        let parameters = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Checkpoint { header, parameters })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Content hash used for provenance records.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

//! 3D convolutions on top of a single-precision GEMM.
//!
//! Regular convolutions use an im2col gather over chunks of output voxels;
//! the input gradient is the matching col2im scatter. The 2×2×2 stride-2
//! transposed convolution is expressed as eight channel-mixing GEMMs, one
//! per kernel tap, since every output voxel receives exactly one tap.

use rand::Rng;

use super::{Param, Tensor};
use crate::volume::Shape3;

/// Upper bound on the im2col buffer, in floats.
const COLS_BUDGET: usize = 1 << 22;

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds for the strided views; matrixmultiply itself is unchecked.
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output positions per shifted-GEMM pass; keeps the accumulator in cache.
const SHIFT_CHUNK: usize = 4096;

/// Zero-pads every spatial axis by `pad` on both sides.
fn pad_tensor(x: &Tensor, pad: usize) -> Tensor {
    let [nx, ny, nz] = x.dims;
    let pdims = [nx + 2 * pad, ny + 2 * pad, nz + 2 * pad];
    let mut out = Tensor::zeros(x.channels, pdims);
    let np = out.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * np..(c + 1) * np];
        for ix in 0..nx {
            for iy in 0..ny {
                let s = (ix * ny + iy) * nz;
                let d = ((ix + pad) * pdims[1] + iy + pad) * pdims[2] + pad;
                dst[d..d + nz].copy_from_slice(&src[s..s + nz]);
            }
        }
    }
    out
}

/// Copies the interior of a padded buffer into `out`.
fn unpad_into(padded: &[f32], pdims: Shape3, pad: usize, out: &mut Tensor) {
    let [nx, ny, nz] = out.dims;
    let np: usize = pdims.iter().product();
    for c in 0..out.channels {
        let src = &padded[c * np..(c + 1) * np];
        let dst = out.channel_mut(c);
        for ix in 0..nx {
            for iy in 0..ny {
                let d = (ix * ny + iy) * nz;
                let s = ((ix + pad) * pdims[1] + iy + pad) * pdims[2] + pad;
                dst[d..d + nz].copy_from_slice(&src[s..s + nz]);
            }
        }
    }
}

/// Per-axis lookup of which source coordinate feeds output coordinate `o`
/// through kernel tap `t` (`-1` when the tap falls into zero padding).
#[derive(Debug, Clone)]
struct AxisTable {
    k: usize,
    src: Vec<i32>,
}

impl AxisTable {
    fn conv(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let mut src = Vec::with_capacity(n_out * k);
        for o in 0..n_out {
            for t in 0..k {
                let i = (o * stride + t) as i64 - pad as i64;
                src.push(if i >= 0 && (i as usize) < n_in {
                    i as i32
                } else {
                    -1
                });
            }
        }
        AxisTable { k, src }
    }

    #[inline]
    fn get(&self, o: usize, t: usize) -> i32 {
        self.src[o * self.k + t]
    }
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Convolution with a cubic kernel, uniform stride and zero padding.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][in][kx][ky][kz]`
    pub weight: Param,
    pub bias: Param,
}

struct Geometry {
    in_dims: Shape3,
    out_dims: Shape3,
    tables: [AxisTable; 3],
}

impl Conv3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        negative_slope: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let taps = kernel * kernel * kernel;
        let fan_in = (in_channels * taps) as f32;
        let bound = (6.0 / ((1.0 + negative_slope * negative_slope) * fan_in)).sqrt();
        let weight = (0..out_channels * in_channels * taps)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    pub fn output_dims(&self, in_dims: Shape3) -> Shape3 {
        in_dims.map(|n| conv_out_dim(n, self.kernel, self.stride, self.pad))
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Stride 1 with "same" padding: handled by shifted GEMMs.
    fn is_same(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && 2 * self.pad + 1 == self.kernel
    }

    fn padded_dims(&self, dims: Shape3) -> Shape3 {
        dims.map(|n| n + 2 * self.pad)
    }

    /// Flat offset of each kernel tap relative to the output position in
    /// the padded grid.
    fn tap_shifts(&self, pdims: Shape3) -> Vec<isize> {
        let (k, p) = (self.kernel as isize, self.pad as isize);
        let (py, pz) = (pdims[1] as isize, pdims[2] as isize);
        let mut v = Vec::with_capacity(self.taps());
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    v.push(((kx - p) * py + (ky - p)) * pz + (kz - p));
                }
            }
        }
        v
    }

    /// First and one-past-last padded positions covering the interior.
    fn interior_span(&self, dims: Shape3, pdims: Shape3) -> (usize, usize) {
        let p = self.pad;
        let first = (p * pdims[1] + p) * pdims[2] + p;
        let last = ((dims[0] - 1 + p) * pdims[1] + dims[1] - 1 + p) * pdims[2] + dims[2] - 1 + p;
        (first, last + 1)
    }

    fn forward_shifted(&self, x: &Tensor, y: &mut Tensor) {
        let pdims = self.padded_dims(x.dims);
        let xp = pad_tensor(x, self.pad);
        let np: usize = pdims.iter().product();
        let mut yp = vec![0.0f32; self.out_channels * np];
        let shifts = self.tap_shifts(pdims);
        let (first, end) = self.interior_span(x.dims, pdims);
        let (ci, taps) = (self.in_channels, self.taps());
        let w = &self.weight.value;
        let mut start = first;
        while start < end {
            let len = SHIFT_CHUNK.min(end - start);
            for (tap, &d) in shifts.iter().enumerate() {
                let src = (start as isize + d) as usize;
                sgemm(
                    self.out_channels,
                    ci,
                    len,
                    &w[tap..],
                    (ci * taps, taps),
                    &xp.data[src..],
                    (np, 1),
                    if tap == 0 { 0.0 } else { 1.0 },
                    &mut yp[start..],
                    (np, 1),
                );
            }
            start += len;
        }
        unpad_into(&yp, pdims, self.pad, y);
    }

    fn backward_shifted(&mut self, x: &Tensor, dy: &Tensor, dx: Option<&mut Tensor>) {
        let pdims = self.padded_dims(x.dims);
        let np: usize = pdims.iter().product();
        let xp = pad_tensor(x, self.pad);
        let dyp = pad_tensor(dy, self.pad);
        let shifts = self.tap_shifts(pdims);
        let (first, end) = self.interior_span(x.dims, pdims);
        let (ci, co, taps) = (self.in_channels, self.out_channels, self.taps());
        for (tap, &d) in shifts.iter().enumerate() {
            let src = (first as isize + d) as usize;
            // dW_tap += dY · X_shiftedᵀ
            sgemm(
                co,
                end - first,
                ci,
                &dyp.data[first..],
                (np, 1),
                &xp.data[src..],
                (1, np),
                1.0,
                &mut self.weight.grad[tap..],
                (ci * taps, taps),
            );
        }
        let Some(dx) = dx else { return };
        let mut dxp = vec![0.0f32; ci * np];
        let w = &self.weight.value;
        let mut start = first;
        while start < end {
            let len = SHIFT_CHUNK.min(end - start);
            for (tap, &d) in shifts.iter().enumerate() {
                let dst = (start as isize + d) as usize;
                // dX_shifted += W_tapᵀ · dY
                sgemm(
                    ci,
                    co,
                    len,
                    &w[tap..],
                    (taps, ci * taps),
                    &dyp.data[start..],
                    (np, 1),
                    1.0,
                    &mut dxp[dst..],
                    (np, 1),
                );
            }
            start += len;
        }
        unpad_into(&dxp, pdims, self.pad, dx);
    }

    fn geometry(&self, in_dims: Shape3) -> Geometry {
        let out_dims = self.output_dims(in_dims);
        let table =
            |a: usize| AxisTable::conv(in_dims[a], out_dims[a], self.kernel, self.stride, self.pad);
        Geometry {
            in_dims,
            out_dims,
            tables: [table(0), table(1), table(2)],
        }
    }

    fn chunk_len(&self, n_out: usize) -> usize {
        let rows = self.in_channels * self.taps();
        (COLS_BUDGET / rows).max(64).min(n_out)
    }

    /// Source offsets for every (tap, voxel) pair of an output chunk.
    fn offsets(&self, g: &Geometry, start: usize, len: usize, offs: &mut Vec<i32>) {
        let k = self.kernel;
        let [_, oy, oz] = g.out_dims;
        let [_, iy, iz] = g.in_dims;
        offs.clear();
        offs.resize(self.taps() * len, -1);
        let mut tap = 0;
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = &mut offs[tap * len..(tap + 1) * len];
                    let (mut x, mut y, mut z) = (start / (oy * oz), (start / oz) % oy, start % oz);
                    for slot in row.iter_mut() {
                        let sx = g.tables[0].get(x, kx);
                        let sy = g.tables[1].get(y, ky);
                        let sz = g.tables[2].get(z, kz);
                        if sx >= 0 && sy >= 0 && sz >= 0 {
                            *slot = ((sx as usize * iy + sy as usize) * iz + sz as usize) as i32;
                        }
                        z += 1;
                        if z == oz {
                            z = 0;
                            y += 1;
                            if y == oy {
                                y = 0;
                                x += 1;
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }

    fn gather(&self, src: &Tensor, offs: &[i32], len: usize, cols: &mut Vec<f32>) {
        let taps = self.taps();
        let n_in = src.voxels();
        cols.clear();
        cols.resize(self.in_channels * taps * len, 0.0);
        for ci in 0..self.in_channels {
            let channel = &src.data[ci * n_in..(ci + 1) * n_in];
            for tap in 0..taps {
                let dst = &mut cols[(ci * taps + tap) * len..(ci * taps + tap + 1) * len];
                for (d, &o) in dst.iter_mut().zip(&offs[tap * len..(tap + 1) * len]) {
                    if o >= 0 {
                        *d = channel[o as usize];
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let g = self.geometry(x.dims);
        let n_out: usize = g.out_dims.iter().product();
        let mut y = Tensor::zeros(self.out_channels, g.out_dims);
        let rows = self.in_channels * self.taps();
        let w = &self.weight.value;
        if self.is_pointwise() {
            sgemm(
                self.out_channels,
                rows,
                n_out,
                w,
                (rows, 1),
                &x.data,
                (n_out, 1),
                0.0,
                &mut y.data,
                (n_out, 1),
            );
        } else if self.is_same() {
            self.forward_shifted(x, &mut y);
        } else {
            let chunk = self.chunk_len(n_out);
            let (mut offs, mut cols) = (Vec::new(), Vec::new());
            let mut start = 0;
            while start < n_out {
                let len = chunk.min(n_out - start);
                self.offsets(&g, start, len, &mut offs);
                self.gather(x, &offs, len, &mut cols);
                sgemm(
                    self.out_channels,
                    rows,
                    len,
                    w,
                    (rows, 1),
                    &cols,
                    (len, 1),
                    0.0,
                    &mut y.data[start..],
                    (n_out, 1),
                );
                start += len;
            }
        }
        for (c, &b) in self.bias.value.iter().enumerate() {
            if b != 0.0 {
                y.channel_mut(c).iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = self.geometry(x.dims);
        assert_eq!(dy.dims, g.out_dims, "conv gradient shape mismatch");
        let n_out = dy.voxels();
        let n_in = x.voxels();
        let rows = self.in_channels * self.taps();

        for (c, gb) in self.bias.grad.iter_mut().enumerate() {
            *gb += dy.channel(c).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }

        let mut dx = need_input_grad.then(|| Tensor::zeros(self.in_channels, x.dims));
        if self.is_pointwise() {
            // dW += dY · Xᵀ
            sgemm(
                self.out_channels,
                n_out,
                rows,
                &dy.data,
                (n_out, 1),
                &x.data,
                (1, n_in),
                1.0,
                &mut self.weight.grad,
                (rows, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dX = Wᵀ · dY
                sgemm(
                    rows,
                    self.out_channels,
                    n_out,
                    &self.weight.value,
                    (1, rows),
                    &dy.data,
                    (n_out, 1),
                    0.0,
                    &mut dx.data,
                    (n_in, 1),
                );
            }
            return dx;
        }
        if self.is_same() {
            self.backward_shifted(x, dy, dx.as_mut());
            return dx;
        }

        let chunk = self.chunk_len(n_out);
        let taps = self.taps();
        let (mut offs, mut cols) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n_out {
            let len = chunk.min(n_out - start);
            self.offsets(&g, start, len, &mut offs);
            self.gather(x, &offs, len, &mut cols);
            sgemm(
                self.out_channels,
                len,
                rows,
                &dy.data[start..],
                (n_out, 1),
                &cols,
                (1, len),
                1.0,
                &mut self.weight.grad,
                (rows, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // reuse the buffer for column gradients
                sgemm(
                    rows,
                    self.out_channels,
                    len,
                    &self.weight.value,
                    (1, rows),
                    &dy.data[start..],
                    (n_out, 1),
                    0.0,
                    &mut cols,
                    (len, 1),
                );
                for ci in 0..self.in_channels {
                    let channel = &mut dx.data[ci * n_in..(ci + 1) * n_in];
                    for tap in 0..taps {
                        let src = &cols[(ci * taps + tap) * len..(ci * taps + tap + 1) * len];
                        for (&d, &o) in src.iter().zip(&offs[tap * len..(tap + 1) * len]) {
                            if o >= 0 {
                                channel[o as usize] += d;
                            }
                        }
                    }
                }
            }
            start += len;
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed convolution with a 2×2×2 kernel and stride 2 (exact 2×
/// upsampling of every spatial axis).
#[derive(Debug, Clone)]
pub struct UpConv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[tap][out][in]`, tap = `(kx*2 + ky)*2 + kz`
    pub weight: Param,
    pub bias: Param,
}

impl UpConv3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        negative_slope: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / ((1.0 + negative_slope * negative_slope) * in_channels as f32)).sqrt();
        let weight = (0..8 * out_channels * in_channels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        UpConv3d {
            in_channels,
            out_channels,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn tap_weight(w: &[f32], tap: usize, co: usize, ci: usize) -> &[f32] {
        &w[tap * co * ci..(tap + 1) * co * ci]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.channels, self.in_channels,
            "upconv input channel mismatch"
        );
        let [nx, ny, nz] = x.dims;
        let out_dims = [2 * nx, 2 * ny, 2 * nz];
        let n_in = x.voxels();
        let n_out = 8 * n_in;
        let (co, ci) = (self.out_channels, self.in_channels);
        let mut y = Tensor::zeros(co, out_dims);
        let mut tmp = vec![0.0f32; co * n_in];
        for tap in 0..8 {
            let (kx, ky, kz) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            sgemm(
                co,
                ci,
                n_in,
                Self::tap_weight(&self.weight.value, tap, co, ci),
                (ci, 1),
                &x.data,
                (n_in, 1),
                0.0,
                &mut tmp,
                (n_in, 1),
            );
            for c in 0..co {
                let src = &tmp[c * n_in..(c + 1) * n_in];
                let dst = &mut y.data[c * n_out..(c + 1) * n_out];
                let b = self.bias.value[c];
                let mut i = 0;
                for x in 0..nx {
                    for yy in 0..ny {
                        let base = ((2 * x + kx) * 2 * ny + 2 * yy + ky) * 2 * nz + kz;
                        for z in 0..nz {
                            dst[base + 2 * z] = src[i] + b;
                            i += 1;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let [nx, ny, nz] = x.dims;
        let n_in = x.voxels();
        let n_out = dy.voxels();
        let (co, ci) = (self.out_channels, self.in_channels);
        for (c, gb) in self.bias.grad.iter_mut().enumerate() {
            *gb += dy.channel(c).iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        let mut dx = Tensor::zeros(ci, x.dims);
        let mut tap_grad = vec![0.0f32; co * n_in];
        for tap in 0..8 {
            let (kx, ky, kz) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            for c in 0..co {
                let src = &dy.data[c * n_out..(c + 1) * n_out];
                let dst = &mut tap_grad[c * n_in..(c + 1) * n_in];
                let mut i = 0;
                for x in 0..nx {
                    for yy in 0..ny {
                        let base = ((2 * x + kx) * 2 * ny + 2 * yy + ky) * 2 * nz + kz;
                        for z in 0..nz {
                            dst[i] = src[base + 2 * z];
                            i += 1;
                        }
                    }
                }
            }
            // dW_tap += dY_tap · Xᵀ
            sgemm(
                co,
                n_in,
                ci,
                &tap_grad,
                (n_in, 1),
                &x.data,
                (1, n_in),
                1.0,
                &mut self.weight.grad[tap * co * ci..(tap + 1) * co * ci],
                (ci, 1),
            );
            // dX += W_tapᵀ · dY_tap
            sgemm(
                ci,
                co,
                n_in,
                Self::tap_weight(&self.weight.value, tap, co, ci),
                (1, ci),
                &tap_grad,
                (n_in, 1),
                1.0,
                &mut dx.data,
                (n_in, 1),
            );
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

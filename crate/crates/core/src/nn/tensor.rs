use crate::error::{invalid, Result};
use crate::volume::{Shape3, Volume};

/// A multi-channel 3D feature map laid out as `[channel][x][y][z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Shape3) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * dims.iter().product::<usize>() {
            return Err(invalid!(
                "buffer of {} values does not match {channels}x{dims:?}",
                data.len()
            ));
        }
        Ok(Tensor {
            channels,
            dims,
            data,
        })
    }

    /// Stacks single-channel volumes of equal shape into one tensor.
    pub fn from_volumes(vols: &[&Volume]) -> Result<Self> {
        let first = vols.first().ok_or_else(|| invalid!("no channels given"))?;
        let dims = first.shape();
        let mut data = Vec::with_capacity(vols.len() * first.len());
        for v in vols {
            if v.shape() != dims {
                return Err(invalid!(
                    "channel shapes differ: {:?} vs {dims:?}",
                    v.shape()
                ));
            }
            data.extend_from_slice(v.as_slice());
        }
        Tensor::from_vec(vols.len(), dims, data)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a volume with the given geometry.
    pub fn channel_volume(&self, c: usize, spacing: [f64; 3], origin: [f64; 3]) -> Result<Volume> {
        Volume::from_vec(self.dims, self.channel(c).to_vec(), spacing, origin)
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.dims, b.dims, "concat of mismatched spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `c` channels, then the rest.
    pub fn split_channels(self, c: usize) -> (Tensor, Tensor) {
        let n = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(c * n);
        (
            Tensor {
                channels: c,
                dims: self.dims,
                data,
            },
            Tensor {
                channels: self.channels - c,
                dims: self.dims,
                data: rest,
            },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

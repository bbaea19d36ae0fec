use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis, IxDyn};
use oodinv_tensor::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Architecture of the generator, encoder and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub output_resolution: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    /// `[resolution, channels]` for every resolution from 4 up to the output.
    pub channels: Vec<[usize; 2]>,
    /// Resolutions at which generator features are aligned, ascending.
    pub align_resolutions: Vec<usize>,
    /// Width of the hidden convolutions of each alignment head.
    pub samm_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            output_resolution: 64,
            style_dim: 64,
            mapping_layers: 4,
            channels: vec![[4, 128], [8, 128], [16, 64], [32, 64], [64, 32]],
            align_resolutions: vec![8, 16, 32],
            samm_hidden: 32,
        }
    }
}

impl NetConfig {
    /// The small configuration the reference pipeline is trained with.
    pub fn reference() -> Self {
        NetConfig {
            output_resolution: 32,
            style_dim: 32,
            mapping_layers: 3,
            channels: vec![[4, 32], [8, 32], [16, 16], [32, 8]],
            align_resolutions: vec![8, 16],
            samm_hidden: 16,
        }
    }

    /// Two style vectors per resolution above 4x4, one for the 4x4 layer and
    /// one for the output convolution.
    pub fn num_style_slots(&self) -> usize {
        2 * self.output_resolution.trailing_zeros() as usize - 2
    }

    /// Resolutions from 4 to the output, ascending.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = 4;
        let mut out = Vec::new();
        while r <= self.output_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        self.channels
            .iter()
            .find(|c| c[0] == resolution)
            .map(|c| c[1])
            .unwrap_or_else(|| panic!("no channel count for resolution {resolution}"))
    }

    /// Index of the style slot driving the output convolution.
    pub fn rgb_slot(&self) -> usize {
        self.num_style_slots() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.output_resolution;
        ensure!(r >= 16 && r.is_power_of_two(), Validation, "output_resolution must be a power of two >= 16, got {r}");
        ensure!(self.style_dim > 0 && self.samm_hidden > 0, Validation, "style_dim and samm_hidden must be positive");
        for res in self.resolutions() {
            ensure!(
                self.channels.iter().any(|c| c[0] == res && c[1] > 0),
                Validation,
                "channel schedule is missing resolution {res}"
            );
        }
        ensure!(!self.align_resolutions.is_empty(), Validation, "at least one align resolution is required");
        for w in self.align_resolutions.windows(2) {
            ensure!(w[0] < w[1], Validation, "align resolutions must be strictly ascending");
        }
        for &a in &self.align_resolutions {
            ensure!(
                a < r && self.resolutions().contains(&a),
                Validation,
                "align resolution {a} must be a generator layer resolution below {r}"
            );
        }
        Ok(())
    }
}

/// A W+ latent: one style vector per generator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    styles: Array2<f64>,
}

impl LatentCode {
    pub fn new(styles: Array2<f64>) -> Result<Self> {
        ensure!(styles.iter().all(|v| v.is_finite()), Validation, "latent code contains non-finite values");
        Ok(LatentCode { styles })
    }

    pub fn for_config(styles: Array2<f64>, cfg: &NetConfig) -> Result<Self> {
        let want = (cfg.num_style_slots(), cfg.style_dim);
        ensure!(styles.dim() == want, Structural, "latent shape {:?}, expected {want:?}", styles.dim());
        Self::new(styles)
    }

    pub fn styles(&self) -> &Array2<f64> {
        &self.styles
    }

    pub fn num_slots(&self) -> usize {
        self.styles.nrows()
    }

    /// Stacks codes into a `[n, slots, dim]` graph constant.
    pub fn stack(codes: &[LatentCode]) -> Var {
        let views: Vec<_> = codes.iter().map(|c| c.styles.view()).collect();
        Var::constant(ndarray::stack(Axis(0), &views).expect("latent shapes differ").into_dyn())
    }

    /// Splits a `[n, slots, dim]` value into codes.
    pub fn unstack(v: &Var) -> Result<Vec<LatentCode>> {
        let a = v.value().view().into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Structural(e.to_string()))?;
        a.outer_iter().map(|s| LatentCode::new(s.to_owned())).collect()
    }
}

/// A 3-channel image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wraps a `[3, r, r]` array, clamping values into `[-1, 1]`.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        ensure!(c == 3 && h == w && h > 0, Structural, "image must be 3 x r x r, got {c} x {h} x {w}");
        ensure!(pixels.iter().all(|v| v.is_finite()), Validation, "image contains non-finite values");
        Ok(ImageTensor { pixels: pixels.mapv(|v| v.clamp(-1.0, 1.0)) })
    }

    pub fn filled(resolution: usize, value: f64) -> Self {
        ImageTensor { pixels: Array3::from_elem((3, resolution, resolution), value.clamp(-1.0, 1.0)) }
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn expect_resolution(&self, r: usize) -> Result<()> {
        ensure!(self.resolution() == r, Structural, "image is {0}x{0}, expected {r}x{r}", self.resolution());
        Ok(())
    }

    /// Stacks images into a `[n, 3, r, r]` graph constant.
    pub fn stack(images: &[ImageTensor]) -> Var {
        Var::constant(Self::stack_array(images))
    }

    pub fn stack_array(images: &[ImageTensor]) -> Array {
        let views: Vec<_> = images.iter().map(|i| i.pixels.view()).collect();
        ndarray::stack(Axis(0), &views).expect("image shapes differ").into_dyn()
    }

    pub fn unstack(v: &Var) -> Result<Vec<ImageTensor>> {
        let a = v.value().view().into_dimensionality::<ndarray::Ix4>().map_err(|e| Error::Structural(e.to_string()))?;
        a.outer_iter().map(|s| ImageTensor::new(s.to_owned())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidRole {
    /// Features of the input image, from the encoder.
    Encoder,
    /// Features produced while synthesizing.
    Generator,
}

/// Feature maps keyed by resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub role: PyramidRole,
    pub levels: BTreeMap<usize, Array3<f64>>,
}

impl FeaturePyramid {
    /// Splits batched `[n, c, r, r]` levels into one pyramid per sample.
    pub fn from_batch(role: PyramidRole, levels: &BTreeMap<usize, Var>) -> Vec<FeaturePyramid> {
        let n = levels.values().next().map(|v| v.shape()[0]).unwrap_or(0);
        (0..n)
            .map(|i| FeaturePyramid {
                role,
                levels: levels
                    .iter()
                    .map(|(&r, v)| {
                        let a = v.value().index_axis(Axis(0), i).to_owned();
                        (r, a.into_dimensionality().expect("feature level must be 4-D"))
                    })
                    .collect(),
            })
            .collect()
    }

    /// Channel count per resolution.
    pub fn signature(&self) -> BTreeMap<usize, usize> {
        self.levels.iter().map(|(&r, a)| (r, a.dim().0)).collect()
    }

    pub fn level_var(&self, resolution: usize) -> Option<Var> {
        self.levels.get(&resolution).map(|a| {
            let (c, h, w) = a.dim();
            Var::constant(a.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap())
        })
    }
}

//! Splitting an image by its invertibility mask and compositing the
//! result.

use ndarray::{Array3, Axis};
use oodinv_tensor::Var;

use crate::error::{ensure, Result};
use crate::nets::ImageTensor;
use crate::samm::GatheredMask;

/// `x_out = x * m` (content the generator cannot reproduce) and
/// `x_in = x * (1 - m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub x_out: Array3<f64>,
    pub x_in: Array3<f64>,
    pub mask: GatheredMask,
}

fn check(x: &ImageTensor, m: &GatheredMask) -> Result<()> {
    ensure!(
        x.resolution() == m.resolution(),
        Structural,
        "image is {0}x{0} but mask is {1}x{1}",
        x.resolution(),
        m.resolution()
    );
    Ok(())
}

pub fn decompose(x: &ImageTensor, m: &GatheredMask) -> Result<Decomposition> {
    check(x, m)?;
    let mm = m.values.view().insert_axis(Axis(0));
    let x_out = x.pixels() * &mm;
    let x_in = x.pixels() * &mm.mapv(|v| 1.0 - v);
    Ok(Decomposition { x_out, x_in, mask: m.clone() })
}

/// `x * m + x_in_hat * (1 - m)`, clamped to `[-1, 1]`.
pub fn blend(x: &ImageTensor, x_in_hat: &ImageTensor, m: &GatheredMask) -> Result<ImageTensor> {
    check(x, m)?;
    check(x_in_hat, m)?;
    let mm = m.values.view().insert_axis(Axis(0));
    let out = x.pixels() * &mm + &(x_in_hat.pixels() * &mm.mapv(|v| 1.0 - v));
    ImageTensor::new(out)
}

/// Graph form of [`blend`] for `[n, 3, r, r]` images and `[n, 1, r, r]` masks.
pub fn blend_var(x: &Var, x_in_hat: &Var, m: &Var) -> Result<Var> {
    ensure!(x.shape() == x_in_hat.shape(), Structural, "blend inputs differ: {:?} vs {:?}", x.shape(), x_in_hat.shape());
    let s = x.shape();
    ensure!(
        m.shape() == [s[0], 1, s[2], s[3]],
        Structural,
        "mask has shape {:?}, images {:?}",
        m.shape(),
        s
    );
    Ok(x.mul(m).add(&x_in_hat.mul(&m.neg().add_scalar(1.0))).clamp(-1.0, 1.0))
}

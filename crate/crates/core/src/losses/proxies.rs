//! Fixed random-weight stand-ins for pretrained perceptual and identity
//! networks. Both sit behind small traits so real feature extractors can be
//! plugged in.

use oodinv_tensor::init::{randn, rng};
use oodinv_tensor::Var;

/// Multi-stage image features for a perceptual distance.
pub trait FeatureProvider: Send + Sync {
    /// `[n, 3, h, w]` -> one feature map per stage.
    fn features(&self, x: &Var) -> Vec<Var>;
}

/// Per-image embedding vectors for an identity distance.
pub trait EmbeddingProvider: Send + Sync {
    /// `[n, 3, h, w]` -> `[n, k]`.
    fn embed(&self, x: &Var) -> Var;
}

fn he_kernel(seed_rng: &mut oodinv_tensor::init::Rng64, out: usize, inp: usize, k: usize) -> Var {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    Var::constant(randn(seed_rng, &[out, inp, k, k]).mapv(|v| v * std))
}

fn pool_if_possible(x: &Var) -> Var {
    let s = x.shape();
    if s[2] >= 2 && s[3] >= 2 && s[2] % 2 == 0 && s[3] % 2 == 0 {
        x.avg_pool2()
    } else {
        x.clone()
    }
}

/// Four convolution stages with frozen random weights; each stage halves
/// the resolution of the previous one's output.
#[derive(Clone, Debug)]
pub struct RandomFeatures {
    kernels: Vec<Var>,
}

impl RandomFeatures {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let widths = [3, 16, 24, 32, 32];
        let kernels = widths.windows(2).map(|w| he_kernel(&mut r, w[1], w[0], 3)).collect();
        RandomFeatures { kernels }
    }
}

impl FeatureProvider for RandomFeatures {
    fn features(&self, x: &Var) -> Vec<Var> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, k) in self.kernels.iter().enumerate() {
            if i > 0 {
                h = pool_if_possible(&h);
            }
            h = h.conv2d(k).leaky_relu(0.2);
            out.push(h.clone());
        }
        out
    }
}

/// Two random convolutions, global average pooling and a random projection.
#[derive(Clone, Debug)]
pub struct RandomEmbedding {
    conv1: Var,
    conv2: Var,
    proj: Var,
}

impl RandomEmbedding {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let conv1 = he_kernel(&mut r, 16, 3, 3);
        let conv2 = he_kernel(&mut r, 32, 16, 3);
        let proj = Var::constant(randn(&mut r, &[32, 32]).mapv(|v| v / 32f64.sqrt()));
        RandomEmbedding { conv1, conv2, proj }
    }
}

impl EmbeddingProvider for RandomEmbedding {
    fn embed(&self, x: &Var) -> Var {
        let h = x.conv2d(&self.conv1).leaky_relu(0.2);
        let h = pool_if_possible(&h).conv2d(&self.conv2).leaky_relu(0.2);
        h.mean_axes(&[2, 3]).reshape(&[x.shape()[0], 32]).matmul(&self.proj)
    }
}

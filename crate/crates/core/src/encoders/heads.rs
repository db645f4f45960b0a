use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;

/// Bound on the log-variance produced by [`DistributionHead`].
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Affine mean and log-variance heads reading a diagonal Gaussian off a latent.
#[derive(Clone, Debug)]
pub struct DistributionHead {
    pub mean: Linear,
    pub logvar: Linear,
}

impl DistributionHead {
    /// The log-variance head starts at zero so initial latents read as unit variance.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            mean: Linear::new(store, &format!("{name}.mean"), dim, dim, rng),
            logvar: Linear::zeros(store, &format!("{name}.logvar"), dim, dim),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> (Var, Var) {
        let mean = self.mean.forward(g, x);
        let logvar = g.clamp(self.logvar.forward(g, x), -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mean, logvar)
    }
}

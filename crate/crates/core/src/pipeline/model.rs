//! The six trainable modules and their fixed order.

use crate::encoders::{Encoder2D, Encoder3D, Encoder3DConfig, ParamSet, ProjectionHead, ProjectionHeadConfig, Upsampler, UpsamplerConfig};
use crate::error::{Error, Result};
use crate::seeding::{stream, tag};

use super::config::ModelConfig;

/// Module names, in the order used by optimizers and checkpoints.
pub const MODULES: [&str; 6] = ["f2d", "g2d", "u2d", "f3d", "g3d", "g2d_t"];
pub const F2D: usize = 0;
pub const G2D: usize = 1;
pub const U2D: usize = 2;
pub const F3D: usize = 3;
pub const G3D: usize = 4;
/// Image-side head of the global transfer loss.
pub const G2D_T: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub f2d: Encoder2D,
    pub g2d: ProjectionHead,
    pub u2d: Upsampler,
    pub f3d: Encoder3D,
    pub g3d: ProjectionHead,
    pub g2d_t: ProjectionHead,
}

impl Model {
    /// Module `k` is initialised from its own stream, so adding or
    /// resizing one module never changes another's initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = |k: usize| stream(seed, &[tag::INIT, k as u64]);
        let d = config.embed_dim;
        let f2d = Encoder2D::new(config.f2d.clone(), &mut init(F2D))?;
        let g2d_cfg = ProjectionHeadConfig { input: config.f2d.flat_dim(), hidden: config.head_hidden, output: d };
        let g2d = ProjectionHead::new(g2d_cfg.clone(), &mut init(G2D))?;
        let u2d = Upsampler::new(UpsamplerConfig::for_encoder(&config.f2d, d), &mut init(U2D))?;
        let f3d = Encoder3D::new(Encoder3DConfig { widths: config.f3d_widths.clone() }, &mut init(F3D))?;
        let g3d_cfg = ProjectionHeadConfig { input: f3d.config.out_channels(), hidden: config.head_hidden, output: d };
        let g3d = ProjectionHead::new(g3d_cfg, &mut init(G3D))?;
        let g2d_t = ProjectionHead::new(g2d_cfg, &mut init(G2D_T))?;
        if g2d.config.output != g3d.config.output || u2d.config.out_channels != g3d.config.output {
            return Err(Error::contract("image and point heads disagree on the embedding width"));
        }
        Ok(Self { config, f2d, g2d, u2d, f3d, g3d, g2d_t })
    }

    pub fn params(&self, k: usize) -> &ParamSet {
        match k {
            F2D => &self.f2d.params,
            G2D => &self.g2d.params,
            U2D => &self.u2d.params,
            F3D => &self.f3d.params,
            G3D => &self.g3d.params,
            G2D_T => &self.g2d_t.params,
            _ => panic!("module index {k} out of range"),
        }
    }

    pub fn params_mut(&mut self, k: usize) -> &mut ParamSet {
        match k {
            F2D => &mut self.f2d.params,
            G2D => &mut self.g2d.params,
            U2D => &mut self.u2d.params,
            F3D => &mut self.f3d.params,
            G3D => &mut self.g3d.params,
            G2D_T => &mut self.g2d_t.params,
            _ => panic!("module index {k} out of range"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..MODULES.len()).map(|k| self.params(k).parameter_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modules_are_seeded_independently() {
        let a = Model::new(ModelConfig::default(), 1).unwrap();
        let b = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(a, b);
        let mut wider = ModelConfig::default();
        wider.f2d.widths = vec![8, 16, 64];
        let c = Model::new(wider, 1).unwrap();
        assert_eq!(c.f3d, a.f3d);
        assert_eq!(c.u2d, a.u2d);
        assert_ne!(Model::new(ModelConfig::default(), 2).unwrap().f3d, a.f3d);
        assert_ne!(a.g2d, a.g2d_t);
    }
}

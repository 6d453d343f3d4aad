//! Backbone, adapter shape and weights bundled together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{init_adapter, AdapterConfig, AdapterRole};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Model<S: Real = f32> {
    pub backbone: Backbone,
    pub adapter: AdapterConfig,
    pub params: ParamStore<S>,
}

impl<S: Real> Model<S> {
    /// Fresh base weights only.
    pub fn init_base(config: BackboneConfig, adapter: AdapterConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(config)?;
        if adapter.token_dim != backbone.config().text_dim {
            return Err(Error::Parameter(format!(
                "adapter token width {} differs from text width {}",
                adapter.token_dim,
                backbone.config().text_dim
            )));
        }
        let params = backbone.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            backbone,
            adapter,
            params,
        })
    }

    /// A model of the given shape carrying `params`, checked as in
    /// [`Model::load_params`].
    pub fn with_params(config: BackboneConfig, adapter: AdapterConfig, params: ParamStore<S>) -> Result<Self> {
        let mut m = Self::init_base(config, adapter, 0)?;
        m.load_params(params)?;
        Ok(m)
    }

    /// Add fresh IEA and TCA weights on top of the current base.
    pub fn init_adapters(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA9_7E55);
        for role in AdapterRole::ALL {
            let p = init_adapter(&self.backbone, &self.adapter, role, &self.params, &mut rng)?;
            self.params.merge(&p);
        }
        Ok(())
    }

    pub fn has_adapter(&self, prefix: &str) -> bool {
        self.params.has_prefix(&format!("{prefix}."))
    }

    /// Adapter groups present in the weights, in role order.
    pub fn adapter_groups(&self) -> Vec<AdapterRole> {
        AdapterRole::ALL
            .into_iter()
            .filter(|r| self.has_adapter(r.prefix()))
            .collect()
    }

    /// Replace the weights after checking every name and shape against a
    /// fresh initialization of the same configuration.
    pub fn load_params(&mut self, loaded: ParamStore<S>) -> Result<()> {
        let mut reference = self.backbone.init_params::<S, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for role in AdapterRole::ALL {
            if loaded.has_prefix(&format!("{}.", role.prefix())) {
                let p = init_adapter(&self.backbone, &self.adapter, role, &reference, &mut rng)?;
                reference.merge(&p);
            }
        }
        for (name, t) in loaded.iter() {
            let want = reference.get(name).map_err(|_| {
                Error::Parameter(format!("checkpoint entry `{name}` does not belong to this model"))
            })?;
            if want.shape() != t.shape() {
                return Err(Error::Parameter(format!(
                    "checkpoint entry `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        if let Some(missing) = reference.names().find(|n| !loaded.contains(n)) {
            return Err(Error::Parameter(format!("checkpoint lacks `{missing}`")));
        }
        self.params = loaded;
        Ok(())
    }
}

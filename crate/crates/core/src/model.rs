use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tape, Tensor};
use crate::fusion::{FusionConfig, FusionError, FusionParams, RgbTokens, SegMap};
use crate::geoembed::{init_embeddings, GeoEmbedError, GeoRepresentation};
use crate::partition::PartitionHierarchy;

/// Fusion network and geographic embeddings sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub store: ParamStore<T>,
    pub fusion: FusionParams,
    pub geo: GeoRepresentation,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Geo(#[from] GeoEmbedError),
}

impl<T: Real> Model<T> {
    /// Fusion weights draw from `seed`, embeddings from `seed + 1`.
    pub fn init(config: &FusionConfig, h: &PartitionHierarchy, seed: u64) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionParams::init(config, &mut store, &mut rng)?;
        let geo = init_embeddings(h, config.embed_dim, seed.wrapping_add(1), &mut store)?;
        Ok(Self { store, fusion, geo })
    }

    /// Rebuilds the id layout over a loaded store.
    pub fn bind(config: &FusionConfig, h: &PartitionHierarchy, store: ParamStore<T>) -> Result<Self, ModelError> {
        let fusion = FusionParams::bind(config, &store)?;
        let geo = GeoRepresentation::bind(h, config.embed_dim, &store)?;
        let expected = fusion.ids(&store).len() + geo.ids().len();
        if expected != store.len() {
            let known: std::collections::HashSet<_> = fusion.ids(&store).into_iter().chain(geo.ids()).collect();
            let extra: Vec<String> = store
                .iter()
                .filter(|(id, _)| !known.contains(id))
                .map(|(_, p)| p.name.clone())
                .collect();
            return Err(ModelError::Fusion(FusionError::Config(format!(
                "unexpected parameters: {}",
                extra.join(", ")
            ))));
        }
        Ok(Self { store, fusion, geo })
    }

    /// The visual feature **v** without recording gradients for later use.
    pub fn features(&self, rgb: &RgbTokens<T>, seg: &SegMap) -> Result<Tensor<T>, FusionError> {
        let mut tape = Tape::new();
        let v = self.fusion.fuse(&mut tape, &self.store, rgb, seg)?;
        Ok(tape.value(v).clone())
    }
}

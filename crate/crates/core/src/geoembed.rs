//! Learned geographic representation: one embedding matrix and one
//! temperature per hierarchy level.
//!
//! Rows are stored unnormalized and normalized on every read, so the
//! optimizer works on unconstrained values. Temperatures are stored as
//! `log τ`, which keeps `τ` positive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var, NORM_FLOOR};
use crate::geodesy::CellId;
use crate::init;
use crate::partition::PartitionHierarchy;

pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error)]
pub enum GeoEmbedError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("level {level} does not exist ({levels} levels)")]
    Level { level: usize, levels: usize },
    #[error("cell {cell} is not part of level {level}")]
    UnknownCell { level: usize, cell: CellId },
    #[error("geographic parameter {0} is missing or has the wrong shape")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelEmbedding {
    pub embedding: ParamId,
    pub log_tau: ParamId,
    /// Row `i` belongs to `cells[i]`, in canonical order.
    pub cells: Vec<CellId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoRepresentation {
    pub dim: usize,
    pub levels: Vec<LevelEmbedding>,
}

pub fn embedding_name(level: usize) -> String {
    format!("geo/level_{level}/embedding")
}

pub fn log_tau_name(level: usize) -> String {
    format!("geo/level_{level}/log_tau")
}

/// Registers `N(0, 1/dim)` embeddings and `log τ = ln 0.07` per level.
pub fn init_embeddings<T: Real>(
    h: &PartitionHierarchy,
    dim: usize,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Result<GeoRepresentation, GeoEmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (dim as f64).sqrt();
    let mut levels = Vec::with_capacity(h.num_levels());
    for (l, p) in h.levels().iter().enumerate() {
        let e = init::normal(&mut rng, p.len(), dim, std);
        let embedding = store.add(embedding_name(l), e)?;
        let log_tau = store.add(log_tau_name(l), Tensor::scalar(T::lit(INIT_TEMPERATURE.ln())))?;
        levels.push(LevelEmbedding {
            embedding,
            log_tau,
            cells: p.cells().iter().map(|c| c.id).collect(),
        });
    }
    Ok(GeoRepresentation { dim, levels })
}

impl GeoRepresentation {
    /// Binds to tensors already present in `store`, e.g. from a checkpoint.
    pub fn bind<T: Real>(h: &PartitionHierarchy, dim: usize, store: &ParamStore<T>) -> Result<Self, GeoEmbedError> {
        let mut levels = Vec::with_capacity(h.num_levels());
        for (l, p) in h.levels().iter().enumerate() {
            let find = |name: String, shape: &[usize]| {
                store
                    .id(&name)
                    .filter(|&id| store.value(id).shape() == shape)
                    .ok_or(GeoEmbedError::Layout(name))
            };
            levels.push(LevelEmbedding {
                embedding: find(embedding_name(l), &[p.len(), dim])?,
                log_tau: find(log_tau_name(l), &[1, 1])?,
                cells: p.cells().iter().map(|c| c.id).collect(),
            });
        }
        Ok(Self { dim, levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, level: usize) -> Result<&LevelEmbedding, GeoEmbedError> {
        self.levels.get(level).ok_or(GeoEmbedError::Level {
            level,
            levels: self.levels.len(),
        })
    }

    pub fn row_of(&self, level: usize, cell: &CellId) -> Result<usize, GeoEmbedError> {
        let lv = self.level(level)?;
        lv.cells
            .binary_search(cell)
            .map_err(|_| GeoEmbedError::UnknownCell { level, cell: *cell })
    }

    /// The unit-norm vector **g** of `cell`.
    pub fn lookup_normalized<T: Real>(
        &self,
        store: &ParamStore<T>,
        level: usize,
        cell: &CellId,
    ) -> Result<Vec<T>, GeoEmbedError> {
        let row = self.row_of(level, cell)?;
        let mut v = store.value(self.levels[level].embedding).row(row).to_vec();
        normalize(&mut v);
        Ok(v)
    }

    /// Every row of a level, normalized, in canonical cell order.
    pub fn all_normalized<T: Real>(&self, store: &ParamStore<T>, level: usize) -> Result<Tensor<T>, GeoEmbedError> {
        let mut m = store.value(self.level(level)?.embedding).clone();
        for r in 0..m.rows() {
            normalize(m.row_mut(r));
        }
        Ok(m)
    }

    pub fn temperature<T: Real>(&self, store: &ParamStore<T>, level: usize) -> Result<T, GeoEmbedError> {
        Ok(store.value(self.level(level)?.log_tau).item().exp())
    }

    /// Normalized rows `rows` of a level as a differentiable tape value.
    pub fn gather_normalized<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        level: usize,
        rows: &[usize],
    ) -> Result<Var, GeoEmbedError> {
        let e = tape.param(store, self.level(level)?.embedding);
        let g = tape.gather_rows(e, rows)?;
        Ok(tape.l2_normalize_rows(g)?)
    }

    /// `1 × 1` tape value holding `1/τ` of a level.
    pub fn inv_temperature<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        level: usize,
    ) -> Result<Var, GeoEmbedError> {
        let lt = tape.param(store, self.level(level)?.log_tau);
        let neg = tape.scale(lt, -T::one())?;
        Ok(tape.exp(neg)?)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.levels.iter().flat_map(|l| [l.embedding, l.log_tau]).collect()
    }
}

fn normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(NORM_FLOOR));
    v.iter_mut().for_each(|x| *x = *x / n);
}

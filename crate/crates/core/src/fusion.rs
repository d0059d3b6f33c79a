//! Semantic fusion network: segmentation-map tokens query RGB tokens through
//! latent cross-attention, and the fused CLS token becomes the visual feature.
//!
//! Every fusion block is pre-norm:
//!
//! ```text
//! s ← s + Attn(LN(s), kv)
//! s ← s + MLP(LN(s))
//! ```
//!
//! Attention compresses the key/value source once into a shared latent
//! (`kv · W_down`) and up-projects it per head into keys and values. Query
//! rows never mix with each other, so each stream row depends only on its own
//! history and the RGB tokens.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::init;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("segmentation class {class} at pixel {index} is outside 0..{classes}")]
    ClassOutOfRange { class: u16, index: usize, classes: usize },
    #[error("segmentation map is {h}x{w}, expected {want_h}x{want_w} (multiples of the patch size)")]
    SegShape { h: usize, w: usize, want_h: usize, want_w: usize },
    #[error("segmentation map has {got} pixels, expected {want}")]
    SegLength { got: usize, want: usize },
    #[error("rgb tokens: {0}")]
    Rgb(String),
}

/// Fusion network dimensions. Defaults are the full-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Width of the ingested RGB tokens.
    pub d_kv: usize,
    /// Width of the semantic stream.
    pub d_s: usize,
    /// Shared key/value latent width.
    pub latent: usize,
    pub heads: usize,
    /// Total attention width, `heads × head_dim`.
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub classes: usize,
    pub seg_h: usize,
    pub seg_w: usize,
    pub activation: Activation,
    /// When off, the feature is the RGB CLS token through the final
    /// norm and projection (features-only baseline).
    pub semantic_fusion: bool,
    /// Trainable self-attention block applied to the RGB tokens first.
    pub rgb_block: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_kv: 1024,
            d_s: 128,
            latent: 64,
            heads: 8,
            attn_dim: 128,
            mlp_hidden: 1024,
            blocks: 3,
            embed_dim: 768,
            patch: 14,
            classes: 150,
            seg_h: 336,
            seg_w: 336,
            activation: Activation::Gelu,
            semantic_fusion: true,
            rgb_block: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let dims = [
            ("d_kv", self.d_kv),
            ("d_s", self.d_s),
            ("latent", self.latent),
            ("heads", self.heads),
            ("attn_dim", self.attn_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("embed_dim", self.embed_dim),
            ("patch", self.patch),
            ("classes", self.classes),
            ("seg_h", self.seg_h),
            ("seg_w", self.seg_w),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(FusionError::Config(format!("{name} must be positive")));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(FusionError::Config(format!(
                "attn_dim {} is not a multiple of heads {}",
                self.attn_dim, self.heads
            )));
        }
        if self.rgb_block && self.d_kv % self.heads != 0 {
            return Err(FusionError::Config(format!(
                "rgb_block needs d_kv {} divisible by heads {}",
                self.d_kv, self.heads
            )));
        }
        if self.semantic_fusion && !(1..=4).contains(&self.blocks) {
            return Err(FusionError::Config(format!("blocks {} outside 1..=4", self.blocks)));
        }
        if self.seg_h % self.patch != 0 || self.seg_w % self.patch != 0 {
            return Err(FusionError::Config(format!(
                "segmentation size {}x{} not divisible by patch {}",
                self.seg_h, self.seg_w, self.patch
            )));
        }
        if self.classes > u16::MAX as usize + 1 {
            return Err(FusionError::Config(format!("{} classes exceed the u16 range", self.classes)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.heads
    }

    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }

    /// Semantic tokens per map, CLS included.
    pub fn sem_tokens(&self) -> usize {
        (self.seg_h / self.patch) * (self.seg_w / self.patch) + 1
    }
}

/// Ingested RGB tokens, `(N_r + 1) × d_kv`, CLS first.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTokens<T> {
    tokens: Tensor<T>,
}

impl<T: Real> RgbTokens<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self, FusionError> {
        let (r, _) = tokens.dims2()?;
        if r < 2 {
            return Err(FusionError::Rgb(format!("{r} rows, need CLS plus at least one patch")));
        }
        if !tokens.is_finite() {
            return Err(FusionError::Rgb("non-finite entry".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tokens
    }
}

/// `H × W` grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    h: usize,
    w: usize,
    ids: Vec<u16>,
}

impl SegMap {
    pub fn new(h: usize, w: usize, ids: Vec<u16>) -> Result<Self, FusionError> {
        if ids.len() != h * w {
            return Err(FusionError::SegLength {
                got: ids.len(),
                want: h * w,
            });
        }
        Ok(Self { h, w, ids })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    /// Row indices into the `(patch_area · classes) × d_s` table, grouped by
    /// patch in raster order; pixel `k` of a patch with class `c` maps to
    /// `k · classes + c`.
    pub fn table_indices(&self, cfg: &FusionConfig) -> Result<Vec<usize>, FusionError> {
        if self.h != cfg.seg_h || self.w != cfg.seg_w {
            return Err(FusionError::SegShape {
                h: self.h,
                w: self.w,
                want_h: cfg.seg_h,
                want_w: cfg.seg_w,
            });
        }
        let p = cfg.patch;
        let mut idx = Vec::with_capacity(self.ids.len());
        for pr in 0..self.h / p {
            for pc in 0..self.w / p {
                for y in 0..p {
                    for x in 0..p {
                        let index = (pr * p + y) * self.w + pc * p + x;
                        let class = self.ids[index];
                        if class as usize >= cfg.classes {
                            return Err(FusionError::ClassOutOfRange {
                                class,
                                index,
                                classes: cfg.classes,
                            });
                        }
                        idx.push((y * p + x) * cfg.classes + class as usize);
                    }
                }
            }
        }
        Ok(idx)
    }
}

/// Parameters of one latent cross-attention fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub q: Vec<ParamId>,
    pub kv_down: ParamId,
    pub k_up: Vec<ParamId>,
    pub v_up: Vec<ParamId>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub mlp: MlpParams,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pre-norm self-attention block over the RGB tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbBlockParams {
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub mlp: MlpParams,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticParams {
    pub patch_table: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
}

/// Ids of every fusion tensor inside a shared [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub semantic: Option<SemanticParams>,
    pub blocks: Vec<BlockParams>,
    pub rgb_block: Option<RgbBlockParams>,
    pub final_ln: (ParamId, ParamId),
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

struct Registrar<'s, T: Real, R: Rng> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut R,
}

impl<T: Real, R: Rng> Registrar<'_, T, R> {
    fn add(&mut self, name: String, value: Tensor<T>) -> Result<ParamId, FusionError> {
        Ok(self.store.add(name, value)?)
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId, FusionError> {
        let v = init::fan_in(self.rng, rows, cols);
        self.add(name, v)
    }

    fn zeros(&mut self, name: String, cols: usize) -> Result<ParamId, FusionError> {
        self.add(name, Tensor::zeros(&[1, cols]))
    }

    fn layer_norm(&mut self, prefix: &str, n: usize) -> Result<(ParamId, ParamId), FusionError> {
        let g = self.add(format!("{prefix}_g"), Tensor::filled(&[1, n], T::one()))?;
        let b = self.zeros(format!("{prefix}_b"), n)?;
        Ok((g, b))
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<MlpParams, FusionError> {
        Ok(MlpParams {
            w1: self.weight(format!("{prefix}/mlp_w1"), d, hidden)?,
            b1: self.zeros(format!("{prefix}/mlp_b1"), hidden)?,
            w2: self.weight(format!("{prefix}/mlp_w2"), hidden, d)?,
            b2: self.zeros(format!("{prefix}/mlp_b2"), d)?,
        })
    }
}

impl FusionParams {
    /// Registers freshly initialized fusion tensors under `fusion/`.
    ///
    /// Learnable tokens and positional embeddings are `N(0, 0.02²)`, weight
    /// matrices `N(0, 1/fan_in)`, layer-norm gains one and biases zero.
    pub fn init<T: Real>(
        config: &FusionConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, FusionError> {
        config.validate()?;
        let c = config;
        let mut r = Registrar { store, rng };

        let rgb_block = if c.rgb_block {
            let hd = c.d_kv / c.heads;
            let p = "fusion/rgb_block";
            let head = |kind: &str, r: &mut Registrar<'_, T, _>| -> Result<Vec<ParamId>, FusionError> {
                (0..c.heads).map(|h| r.weight(format!("{p}/{kind}{h}"), c.d_kv, hd)).collect()
            };
            Some(RgbBlockParams {
                ln1: r.layer_norm(&format!("{p}/ln1"), c.d_kv)?,
                q: head("q", &mut r)?,
                k: head("k", &mut r)?,
                v: head("v", &mut r)?,
                out_w: r.weight(format!("{p}/out_w"), c.d_kv, c.d_kv)?,
                out_b: r.zeros(format!("{p}/out_b"), c.d_kv)?,
                ln2: r.layer_norm(&format!("{p}/ln2"), c.d_kv)?,
                mlp: r.mlp(p, c.d_kv, c.mlp_hidden)?,
            })
        } else {
            None
        };

        let (semantic, blocks, head_width) = if c.semantic_fusion {
            let table = init::fan_in(r.rng, c.patch_area() * c.classes, c.d_s);
            let cls = init::normal(r.rng, 1, c.d_s, 0.02);
            let pos = init::normal(r.rng, c.sem_tokens(), c.d_s, 0.02);
            let semantic = SemanticParams {
                patch_table: r.add("fusion/sem/patch_table".into(), table)?,
                cls: r.add("fusion/sem/cls".into(), cls)?,
                pos: r.add("fusion/sem/pos".into(), pos)?,
            };
            let hd = c.head_dim();
            let mut blocks = Vec::with_capacity(c.blocks);
            for b in 0..c.blocks {
                let p = format!("fusion/block{b}");
                let ln1 = r.layer_norm(&format!("{p}/ln1"), c.d_s)?;
                let q = (0..c.heads)
                    .map(|h| r.weight(format!("{p}/q{h}"), c.d_s, hd))
                    .collect::<Result<_, _>>()?;
                let kv_down = r.weight(format!("{p}/kv_down"), c.d_kv, c.latent)?;
                let k_up = (0..c.heads)
                    .map(|h| r.weight(format!("{p}/k_up{h}"), c.latent, hd))
                    .collect::<Result<_, _>>()?;
                let v_up = (0..c.heads)
                    .map(|h| r.weight(format!("{p}/v_up{h}"), c.latent, hd))
                    .collect::<Result<_, _>>()?;
                let out_w = r.weight(format!("{p}/out_w"), c.attn_dim, c.d_s)?;
                let out_b = r.zeros(format!("{p}/out_b"), c.d_s)?;
                let ln2 = r.layer_norm(&format!("{p}/ln2"), c.d_s)?;
                let mlp = r.mlp(&p, c.d_s, c.mlp_hidden)?;
                blocks.push(BlockParams {
                    q,
                    kv_down,
                    k_up,
                    v_up,
                    out_w,
                    out_b,
                    mlp,
                    ln1,
                    ln2,
                });
            }
            (Some(semantic), blocks, c.d_s)
        } else {
            (None, Vec::new(), c.d_kv)
        };

        let final_ln = r.layer_norm("fusion/final_ln", head_width)?;
        let proj_w = r.weight("fusion/proj_w".into(), head_width, c.embed_dim)?;
        let proj_b = r.zeros("fusion/proj_b".into(), c.embed_dim)?;
        Ok(Self {
            config: config.clone(),
            semantic,
            blocks,
            rgb_block,
            final_ln,
            proj_w,
            proj_b,
        })
    }

    /// Looks up an existing layout by name, e.g. after loading a checkpoint.
    pub fn bind<T: Real>(config: &FusionConfig, store: &ParamStore<T>) -> Result<Self, FusionError> {
        // Initialize a throwaway store to learn the names, then map them.
        let mut scratch = ParamStore::<T>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layout = Self::init(config, &mut scratch, &mut rng)?;
        let remap = |id: ParamId| -> Result<ParamId, FusionError> {
            let p = scratch.get(id);
            let found = store
                .id(&p.name)
                .ok_or_else(|| FusionError::Config(format!("missing parameter {}", p.name)))?;
            if store.value(found).shape() != p.value.shape() {
                return Err(FusionError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    store.value(found).shape(),
                    p.value.shape()
                )));
            }
            Ok(found)
        };
        layout.map_ids(remap)
    }

    fn map_ids(&self, f: impl Fn(ParamId) -> Result<ParamId, FusionError>) -> Result<Self, FusionError> {
        let many = |v: &[ParamId]| v.iter().map(|&i| f(i)).collect::<Result<Vec<_>, _>>();
        let pair = |p: (ParamId, ParamId)| -> Result<_, FusionError> { Ok((f(p.0)?, f(p.1)?)) };
        let mlp = |m: &MlpParams| -> Result<_, FusionError> {
            Ok(MlpParams {
                w1: f(m.w1)?,
                b1: f(m.b1)?,
                w2: f(m.w2)?,
                b2: f(m.b2)?,
            })
        };
        Ok(Self {
            config: self.config.clone(),
            semantic: match &self.semantic {
                Some(s) => Some(SemanticParams {
                    patch_table: f(s.patch_table)?,
                    cls: f(s.cls)?,
                    pos: f(s.pos)?,
                }),
                None => None,
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    Ok(BlockParams {
                        q: many(&b.q)?,
                        kv_down: f(b.kv_down)?,
                        k_up: many(&b.k_up)?,
                        v_up: many(&b.v_up)?,
                        out_w: f(b.out_w)?,
                        out_b: f(b.out_b)?,
                        mlp: mlp(&b.mlp)?,
                        ln1: pair(b.ln1)?,
                        ln2: pair(b.ln2)?,
                    })
                })
                .collect::<Result<_, FusionError>>()?,
            rgb_block: match &self.rgb_block {
                Some(b) => Some(RgbBlockParams {
                    q: many(&b.q)?,
                    k: many(&b.k)?,
                    v: many(&b.v)?,
                    out_w: f(b.out_w)?,
                    out_b: f(b.out_b)?,
                    mlp: mlp(&b.mlp)?,
                    ln1: pair(b.ln1)?,
                    ln2: pair(b.ln2)?,
                }),
                None => None,
            },
            final_ln: pair(self.final_ln)?,
            proj_w: f(self.proj_w)?,
            proj_b: f(self.proj_b)?,
        })
    }

    /// Semantic tokens, `(patches + 1) × d_s`: each patch token sums the table
    /// rows of its pixels (a linear map of the one-hot patch), CLS is
    /// prepended, and positional embeddings are added to every row.
    pub fn tokenize_segmap<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        seg: &SegMap,
    ) -> Result<Var, FusionError> {
        let sp = self
            .semantic
            .as_ref()
            .ok_or_else(|| FusionError::Config("semantic fusion is disabled".into()))?;
        let idx = seg.table_indices(&self.config)?;
        let table = tape.param(store, sp.patch_table);
        let patches = tape.gather_sum_rows(table, &idx, self.config.patch_area())?;
        let cls = tape.param(store, sp.cls);
        let tokens = tape.concat_rows(&[cls, patches])?;
        let pos = tape.param(store, sp.pos);
        Ok(tape.add(tokens, pos)?)
    }

    pub fn latent_cross_attention<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        queries: Var,
        kv: Var,
        block: &BlockParams,
    ) -> Result<Var, FusionError> {
        let latent = {
            let w = tape.param(store, block.kv_down);
            tape.matmul(kv, w)?
        };
        let heads: Vec<(Var, Var, Var)> = (0..self.config.heads)
            .map(|h| {
                (
                    tape.param(store, block.q[h]),
                    tape.param(store, block.k_up[h]),
                    tape.param(store, block.v_up[h]),
                )
            })
            .collect();
        let mut per_head = Vec::with_capacity(heads.len());
        for (wq, wk, wv) in heads {
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(latent, wk)?;
            let v = tape.matmul(latent, wv)?;
            per_head.push((q, k, v));
        }
        let out_w = tape.param(store, block.out_w);
        let out_b = tape.param(store, block.out_b);
        attend(tape, &per_head, self.config.head_dim(), out_w, out_b)
    }

    pub fn fusion_block<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        stream: Var,
        kv: Var,
        block: &BlockParams,
    ) -> Result<Var, FusionError> {
        let normed = layer_norm(tape, store, stream, block.ln1)?;
        let attn = self.latent_cross_attention(tape, store, normed, kv, block)?;
        let s = tape.add(stream, attn)?;
        let normed = layer_norm(tape, store, s, block.ln2)?;
        let m = mlp(tape, store, normed, &block.mlp, self.config.activation)?;
        Ok(tape.add(s, m)?)
    }

    /// The trainable RGB encoder block, or `rgb` unchanged when disabled.
    pub fn rgb_encoder_block<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        rgb: Var,
    ) -> Result<Var, FusionError> {
        let Some(b) = &self.rgb_block else {
            return Ok(rgb);
        };
        let normed = layer_norm(tape, store, rgb, b.ln1)?;
        let mut per_head = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (wq, wk, wv) = (
                tape.param(store, b.q[h]),
                tape.param(store, b.k[h]),
                tape.param(store, b.v[h]),
            );
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            per_head.push((q, k, v));
        }
        let out_w = tape.param(store, b.out_w);
        let out_b = tape.param(store, b.out_b);
        let attn = attend(tape, &per_head, self.config.d_kv / self.config.heads, out_w, out_b)?;
        let x = tape.add(rgb, attn)?;
        let normed = layer_norm(tape, store, x, b.ln2)?;
        let m = mlp(tape, store, normed, &b.mlp, self.config.activation)?;
        Ok(tape.add(x, m)?)
    }

    /// The `1 × embed_dim` unit-norm visual feature.
    pub fn fuse<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        rgb: &RgbTokens<T>,
        seg: &SegMap,
    ) -> Result<Var, FusionError> {
        if rgb.tensor().cols() != self.config.d_kv {
            return Err(FusionError::Rgb(format!(
                "width {}, expected {}",
                rgb.tensor().cols(),
                self.config.d_kv
            )));
        }
        let kv = tape.constant(rgb.tensor().clone());
        let kv = self.rgb_encoder_block(tape, store, kv)?;
        let cls = if self.semantic.is_some() {
            let mut s = self.tokenize_segmap(tape, store, seg)?;
            for block in &self.blocks {
                s = self.fusion_block(tape, store, s, kv, block)?;
            }
            tape.slice_rows(s, 0, 1)?
        } else {
            tape.slice_rows(kv, 0, 1)?
        };
        let normed = layer_norm(tape, store, cls, self.final_ln)?;
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        let projected = tape.matmul(normed, w)?;
        let projected = tape.add_row(projected, b)?;
        Ok(tape.l2_normalize_rows(projected)?)
    }

    /// Every fusion parameter id, in registration order.
    pub fn ids<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with("fusion/"))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Scaled dot-product attention per head, then the output projection with
/// head `h` using rows `h·hd..(h+1)·hd` of `out_w`.
fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    heads: &[(Var, Var, Var)],
    hd: usize,
    out_w: Var,
    out_b: Var,
) -> Result<Var, FusionError> {
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut acc: Option<Var> = None;
    for (h, &(q, k, v)) in heads.iter().enumerate() {
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        let o = tape.matmul(weights, v)?;
        let wo = tape.slice_rows(out_w, h * hd, (h + 1) * hd)?;
        let part = tape.matmul(o, wo)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    let acc = acc.ok_or_else(|| FusionError::Config("no attention heads".into()))?;
    Ok(tape.add_row(acc, out_b)?)
}

fn layer_norm<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    x: Var,
    (g, b): (ParamId, ParamId),
) -> Result<Var, FusionError> {
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    Ok(tape.layer_norm(x, g, b)?)
}

fn mlp<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    x: Var,
    p: &MlpParams,
    act: Activation,
) -> Result<Var, FusionError> {
    let (w1, b1, w2, b2) = (
        tape.param(store, p.w1),
        tape.param(store, p.b1),
        tape.param(store, p.w2),
        tape.param(store, p.b2),
    );
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.activation(h, act)?;
    let o = tape.matmul(h, w2)?;
    Ok(tape.add_row(o, b2)?)
}

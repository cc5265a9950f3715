//! Fusion, transformer backbone, action head and loss.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ACTION_DIM};
use crate::autodiff::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::depth_encoder::{orthogonality_penalty, DepthEncoderParams};
use crate::encoders::{EncoderDims, EncoderParams, View};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp: [Linear; 2],
}

/// Parameter handles for every piece of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub encoders: EncoderParams,
    /// One independently parameterized encoder per camera view.
    pub depth: Vec<DepthEncoderParams>,
    pub blocks: Vec<Block>,
    pub head: Linear,
    pub null_embedding: ParamId,
    pub queries: ParamId,
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore<f32>,
    pub layout: Layout,
}

impl PolicyParams {
    /// Fresh parameters. Construction order is fixed, so a config and a
    /// vocabulary size fully determine names, shapes and the init draw.
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.init_seed, seed::stream::INIT, 0));
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            d: config.d,
            d_v: config.d_v,
            d_l: config.d_l,
            d_p: config.d_p,
            image_size: config.image_size,
            patch: config.patch,
            t_max: config.t_max,
            vocab: vocab_size,
            wrist: config.wrist,
        };
        let encoders = EncoderParams::new(&mut store, &dims, &mut rng)?;
        let depth = (0..config.views())
            .map(|v| DepthEncoderParams::new(&mut store, &format!("depth{v}"), config.d, &mut rng))
            .collect();
        let d = config.d;
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                    qkv: Linear::new(&mut store, &format!("{n}.qkv"), d, 3 * d, true, &mut rng),
                    out: Linear::new(&mut store, &format!("{n}.out"), d, d, true, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                    mlp: [
                        Linear::new(&mut store, &format!("{n}.mlp.0"), d, config.mlp_hidden, true, &mut rng),
                        Linear::new(&mut store, &format!("{n}.mlp.1"), config.mlp_hidden, d, true, &mut rng),
                    ],
                }
            })
            .collect();
        let head = Linear::new(&mut store, "head", d, ACTION_DIM, true, &mut rng);
        let null_embedding = store.add("null_embedding", Tensor::randn(&[d], 0.02, &mut rng));
        let queries = store.add("queries", Tensor::randn(&[config.chunk, d], 1.0, &mut rng));
        Ok(PolicyParams {
            config: config.clone(),
            vocab_size,
            store,
            layout: Layout {
                encoders,
                depth,
                blocks,
                head,
                null_embedding,
                queries,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn depth_params(&self) -> usize {
        self.layout.depth.iter().map(DepthEncoderParams::num_params).sum()
    }

    /// Full forward pass from host-side inputs to a `[B, K, 7]` chunk of
    /// normalized actions.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &BatchInputs,
        use_depth: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let l = &self.layout;
        let b = batch.size;
        let np = cfg.num_patches();
        let feat = cfg.patch * cfg.patch * 3;

        let patches = tape.constant(host(&[b, np, feat], &batch.static_patches)?);
        let v = l.encoders.encode_image(tape, p, patches, View::Static)?;
        let text = l.encoders.encode_text(tape, p, &batch.tokens)?;
        let (v, text) = l.encoders.project_common(tape, p, v, text)?;
        let v = match &batch.keep {
            Some(keep) => pool_on_tape(tape, p[l.null_embedding], v, keep)?,
            None => v,
        };

        let wrist = match (&batch.wrist_patches, cfg.wrist) {
            (Some(w), true) => {
                let wp = tape.constant(host(&[b, np, feat], w)?);
                let wv = l.encoders.encode_image(tape, p, wp, View::Wrist)?;
                Some(l.encoders.w_v.forward(tape, p, wv)?)
            }
            (None, false) => None,
            _ => return Err(Error::Config("wrist inputs do not match the wrist flag".into())),
        };

        let state = tape.constant(host(&[b, cfg.d_p], &batch.proprio)?);
        let prop = l.encoders.encode_proprio(tape, p, state)?;
        let prop = tape.reshape(prop, &[b, 1, cfg.d])?;

        let mut depth_tokens = Vec::new();
        let mut tnet = Vec::new();
        if use_depth {
            if batch.clouds.len() != l.depth.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} clouds for {} depth encoders",
                    batch.clouds.len(),
                    l.depth.len()
                )));
            }
            for (enc, cloud) in l.depth.iter().zip(&batch.clouds) {
                let n = cloud.len() / (3 * b.max(1));
                let pts = tape.constant(host(&[b, n, 3], cloud)?);
                let (emb, m) = enc.encode_cloud(tape, p, pts)?;
                depth_tokens.push(tape.reshape(emb, &[b, 1, cfg.d])?);
                tnet.push(m);
            }
        }

        let zeros = tape.constant(Tensor::zeros(&[b, cfg.chunk, cfg.d]));
        let queries = tape.add(zeros, p[l.queries])?;
        let (z, layout) = fuse(tape, v, wrist, text, prop, &depth_tokens, Some(queries))?;
        if layout.len > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "fused length {} exceeds max_len {}",
                layout.len, cfg.max_len
            )));
        }
        let key_mask = text_key_mask(&layout, &batch.token_lens, b);
        let h = backbone_forward(tape, p, &l.blocks, cfg.heads, z, key_mask.as_deref())?;
        let slots = tape.slice(h, 1, layout.queries.start, cfg.chunk)?;
        let actions = action_head(tape, p, &l.head, slots)?;
        Ok(ForwardOutput { actions, tnet, layout })
    }
}

fn host<T: Scalar>(shape: &[usize], data: &[f32]) -> Result<Tensor<T>> {
    Ok(Tensor::new(shape.to_vec(), data.to_vec())?.cast())
}

/// `v ⊙ keep + (1 − keep) ⊗ null` with keep flags `[B·P]` in {0, 1}.
fn pool_on_tape<T: Scalar>(tape: &mut Tape<T>, null: Var, v: Var, keep: &[f32]) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if keep.len() != s[0] * s[1] {
        return Err(Error::ShapeMismatch {
            op: "pool",
            lhs: s,
            rhs: vec![keep.len()],
        });
    }
    let k = tape.constant(host(&[s[0], s[1], 1], keep)?);
    let inv: Vec<f32> = keep.iter().map(|&x| 1.0 - x).collect();
    let ik = tape.constant(host(&[s[0], s[1], 1], &inv)?);
    let kept = tape.mul(v, k)?;
    let filled = tape.mul(ik, null)?;
    tape.add(kept, filled)
}

/// Additive key mask for padded text positions, `[B, L]` flags (true = masked).
fn text_key_mask(layout: &FusedLayout, lens: &[usize], b: usize) -> Option<Vec<bool>> {
    let t = layout.text.len();
    if lens.iter().all(|&n| n >= t) {
        return None;
    }
    let mut mask = vec![false; b * layout.len];
    for (i, &n) in lens.iter().enumerate() {
        for j in n..t {
            mask[i * layout.len + layout.text.start + j] = true;
        }
    }
    Some(mask)
}

pub struct ForwardOutput {
    /// `[B, K, 7]`, normalized action units.
    pub actions: Var,
    /// Per-view `[B, 3, 3]` input transforms.
    pub tnet: Vec<Var>,
    pub layout: FusedLayout,
}

/// Positions of each segment in the fused sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedLayout {
    pub static_patches: Range<usize>,
    pub wrist_patches: Range<usize>,
    pub text: Range<usize>,
    pub proprio: usize,
    pub depth: Range<usize>,
    pub queries: Range<usize>,
    pub len: usize,
}

impl FusedLayout {
    pub fn new(patches: usize, wrist_patches: usize, text: usize, depth: usize, queries: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let static_patches = take(patches);
        let wrist_patches = take(wrist_patches);
        let text = take(text);
        let proprio = take(1).start;
        let depth = take(depth);
        let queries = take(queries);
        FusedLayout {
            static_patches,
            wrist_patches,
            text,
            proprio,
            depth,
            queries,
            len: at,
        }
    }
}

/// Concatenate `[static, wrist?, text, proprio, depth…, queries?]` along the
/// sequence axis. Every part is `[B, n, d]`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    static_patches: Var,
    wrist: Option<Var>,
    text: Var,
    proprio: Var,
    depth: &[Var],
    queries: Option<Var>,
) -> Result<(Var, FusedLayout)> {
    let mut parts = vec![static_patches];
    parts.extend(wrist);
    parts.push(text);
    parts.push(proprio);
    parts.extend_from_slice(depth);
    parts.extend(queries);
    let s0 = tape.shape(static_patches).to_vec();
    for &v in &parts {
        let s = tape.shape(v);
        if s.len() != 3 || s[0] != s0[0] || s[2] != s0[2] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: s0,
                rhs: s.to_vec(),
            });
        }
    }
    let n = |v: Option<Var>, tape: &Tape<T>| v.map(|v| tape.shape(v)[1]).unwrap_or(0);
    let layout = FusedLayout::new(
        s0[1],
        n(wrist, tape),
        tape.shape(text)[1],
        depth.iter().map(|&v| tape.shape(v)[1]).sum(),
        n(queries, tape),
    );
    if tape.shape(proprio)[1] != 1 {
        return Err(Error::InvalidShape {
            op: "fuse",
            detail: "proprio must be a single token".into(),
        });
    }
    let z = tape.concat(&parts, 1)?;
    Ok((z, layout))
}

/// Pre-norm transformer with full bidirectional attention. `key_mask`
/// marks `[B, L]` positions no query may attend to.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    blocks: &[Block],
    heads: usize,
    z: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "backbone",
            detail: format!("expected [B, L, d], got {:?}", s),
        });
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let bias = match key_mask {
        Some(m) if m.len() == b * l => {
            let neg = T::from_f64(-1e9);
            let mut data = Vec::with_capacity(b * heads * l);
            for bi in 0..b {
                for _ in 0..heads {
                    data.extend(m[bi * l..(bi + 1) * l].iter().map(|&x| if x { neg } else { T::zero() }));
                }
            }
            Some(tape.constant(Tensor::new(vec![b * heads, 1, l], data)?))
        }
        Some(m) => {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: vec![b, l],
                rhs: vec![m.len()],
            })
        }
        None => None,
    };
    let split_heads = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, l, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, l, dh])
    };
    let mut z = z;
    for blk in blocks {
        let h = blk.ln1.forward(tape, p, z)?;
        let qkv = blk.qkv.forward(tape, p, h)?;
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, d)?;
        let v = tape.slice(qkv, 2, 2 * d, d)?;
        let (q, k, v) = (split_heads(tape, q)?, split_heads(tape, k)?, split_heads(tape, v)?);
        let kt = tape.transpose_last(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = tape.add(scores, bias)?;
        }
        let att = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(att, v)?;
        let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, d])?;
        let a = blk.out.forward(tape, p, ctx)?;
        z = tape.add(z, a)?;

        let h = blk.ln2.forward(tape, p, z)?;
        let h = blk.mlp[0].forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let m = blk.mlp[1].forward(tape, p, h)?;
        z = tape.add(z, m)?;
    }
    Ok(z)
}

/// `a = W_a h + b` at each query slot: `[B, K, d]` to `[B, K, 7]`.
pub fn action_head<T: Scalar>(tape: &mut Tape<T>, p: &Bound, head: &Linear, slots: Var) -> Result<Var> {
    head.forward(tape, p, slots)
}

/// Mean absolute error over every element plus `lambda` times the summed
/// per-view transform penalty.
pub fn training_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, tnet: &[Var], lambda: f64) -> Result<Var> {
    let mut loss = tape.l1_loss(pred, target)?;
    if lambda != 0.0 {
        for &m in tnet {
            let pen = orthogonality_penalty(tape, m)?;
            let pen = tape.scale(pen, lambda)?;
            loss = tape.add(loss, pen)?;
        }
    }
    Ok(loss)
}

/// Host-side inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs {
    pub static_patches: Vec<f32>,
    pub wrist_patches: Option<Vec<f32>>,
    /// Patch keep flags; `None` leaves every patch as is.
    pub keep: Option<Vec<bool>>,
    pub tokens: Vec<u32>,
    pub proprio: [f32; crate::sim::PROPRIO_DIM],
    /// One normalized `n × 3` cloud per view; empty when depth is off.
    pub clouds: Vec<Vec<f32>>,
}

/// A batch laid out for [`PolicyParams::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs {
    pub size: usize,
    pub static_patches: Vec<f32>,
    pub wrist_patches: Option<Vec<f32>>,
    pub keep: Option<Vec<f32>>,
    /// Right-padded to a common length.
    pub tokens: Vec<Vec<u32>>,
    pub token_lens: Vec<usize>,
    pub proprio: Vec<f32>,
    pub clouds: Vec<Vec<f32>>,
}

impl BatchInputs {
    pub fn collate(samples: &[SampleInputs]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let views = first.clouds.len();
        let t = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::InvalidArgument("sample without tokens".into()));
        }
        let keep_len = samples.iter().find_map(|s| s.keep.as_ref().map(Vec::len));
        let mut out = BatchInputs {
            size: samples.len(),
            static_patches: Vec::with_capacity(samples.len() * first.static_patches.len()),
            wrist_patches: first.wrist_patches.as_ref().map(|_| Vec::new()),
            keep: keep_len.map(|_| Vec::new()),
            tokens: Vec::with_capacity(samples.len()),
            token_lens: Vec::with_capacity(samples.len()),
            proprio: Vec::with_capacity(samples.len() * 8),
            clouds: vec![Vec::new(); views],
        };
        for s in samples {
            if s.static_patches.len() != first.static_patches.len()
                || s.clouds.len() != views
                || s.wrist_patches.is_some() != first.wrist_patches.is_some()
            {
                return Err(Error::InvalidArgument("inconsistent samples in batch".into()));
            }
            out.static_patches.extend_from_slice(&s.static_patches);
            if let (Some(dst), Some(src)) = (out.wrist_patches.as_mut(), s.wrist_patches.as_ref()) {
                dst.extend_from_slice(src);
            }
            if let (Some(k), Some(n)) = (out.keep.as_mut(), keep_len) {
                match &s.keep {
                    Some(flags) if flags.len() == n => k.extend(flags.iter().map(|&f| f as u8 as f32)),
                    Some(_) => return Err(Error::InvalidArgument("keep flags differ in length".into())),
                    None => k.extend(std::iter::repeat_n(1.0, n)),
                }
            }
            let mut ids = s.tokens.clone();
            out.token_lens.push(ids.len());
            ids.resize(t, crate::lang::PAD);
            out.tokens.push(ids);
            out.proprio.extend_from_slice(&s.proprio);
            for (dst, src) in out.clouds.iter_mut().zip(&s.clouds) {
                dst.extend_from_slice(src);
            }
        }
        Ok(out)
    }
}

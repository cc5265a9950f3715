//! Patch, token and proprioception encoders plus the projections into the
//! shared width `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{sinusoid_2d, sinusoid_table, Linear};

/// Widths the encoders are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub d: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_p: usize,
    pub image_size: usize,
    pub patch: usize,
    pub t_max: usize,
    pub vocab: usize,
    pub wrist: bool,
}

impl EncoderDims {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub pos_static: ParamId,
    pub pos_wrist: Option<ParamId>,
    pub token_table: ParamId,
    pub pos_text: ParamId,
    pub w_v: Linear,
    pub w_l: Linear,
    pub proprio: [Linear; 2],
}

/// Which camera a patch grid came from; selects the positional table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Static,
    Wrist,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, dims: &EncoderDims, rng: &mut R) -> Result<Self> {
        if dims.patch == 0 || dims.image_size % dims.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not tile image size {}",
                dims.patch, dims.image_size
            )));
        }
        let g = dims.grid();
        let patch_embed = Linear::new(store, "enc.patch", dims.patch_features(), dims.d_v, true, rng);
        let pos_static = store.add("enc.pos_static", sinusoid_2d(g, g, dims.d_v));
        let pos_wrist = dims
            .wrist
            .then(|| store.add("enc.pos_wrist", sinusoid_2d(g, g, dims.d_v)));
        let token_table = store.add("enc.tokens", Tensor::randn(&[dims.vocab, dims.d_l], 1.0, rng));
        let pos_text = store.add("enc.pos_text", sinusoid_table(dims.t_max, dims.d_l));
        let w_v = Linear::new(store, "enc.w_v", dims.d_v, dims.d, false, rng);
        let w_l = Linear::new(store, "enc.w_l", dims.d_l, dims.d, false, rng);
        let proprio = [
            Linear::new(store, "enc.proprio.0", dims.d_p, dims.d, true, rng),
            Linear::new(store, "enc.proprio.1", dims.d, dims.d, true, rng),
        ];
        Ok(EncoderParams {
            patch_embed,
            pos_static,
            pos_wrist,
            token_table,
            pos_text,
            w_v,
            w_l,
            proprio,
        })
    }

    /// `[B, P, patch²·3]` raw patches to `[B, P, d_v]` with positions added.
    pub fn encode_image<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, patches: Var, view: View) -> Result<Var> {
        let s = tape.shape(patches).to_vec();
        if s.len() != 3 || s[2] != self.patch_embed.fan_in {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: s,
                rhs: vec![self.patch_embed.fan_in],
            });
        }
        let pos = match view {
            View::Static => self.pos_static,
            View::Wrist => self
                .pos_wrist
                .ok_or_else(|| Error::Config("wrist view not enabled".into()))?,
        };
        let v = self.patch_embed.forward(tape, p, patches)?;
        tape.add(v, p[pos])
    }

    /// Token ids `[B][T]` (equal lengths) to `[B, T, d_l]`.
    pub fn encode_text<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, ids: &[Vec<u32>]) -> Result<Var> {
        let b = ids.len();
        let t = ids.first().map(Vec::len).unwrap_or(0);
        if b == 0 || t == 0 || ids.iter().any(|r| r.len() != t) {
            return Err(Error::InvalidArgument(
                "token batch must be non-empty and rectangular".into(),
            ));
        }
        let t_max = tape.shape(p[self.pos_text])[0];
        if t > t_max {
            return Err(Error::InvalidArgument(format!("{t} tokens exceed T_max {t_max}")));
        }
        let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
        let rows = tape.gather_rows(p[self.token_table], &flat)?;
        let d_l = tape.shape(rows)[1];
        let seq = tape.reshape(rows, &[b, t, d_l])?;
        let pos = if t == t_max {
            p[self.pos_text]
        } else {
            tape.slice(p[self.pos_text], 0, 0, t)?
        };
        tape.add(seq, pos)
    }

    /// `(W_v v, W_l l)`.
    pub fn project_common<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, v: Var, l: Var) -> Result<(Var, Var)> {
        Ok((self.w_v.forward(tape, p, v)?, self.w_l.forward(tape, p, l)?))
    }

    /// `[B, d_p]` to `[B, d]`.
    pub fn encode_proprio<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, state: Var) -> Result<Var> {
        if !tape.value(state).is_finite() {
            return Err(Error::NonFinite("proprio state".into()));
        }
        let h = self.proprio[0].forward(tape, p, state)?;
        let h = tape.relu(h)?;
        self.proprio[1].forward(tape, p, h)
    }
}

/// Cut an image into non-overlapping `patch`x`patch` tiles. Patches are in
/// row-major grid order; each is flattened row by row with RGB interleaved.
pub fn patchify(img: &RgbImage, patch: usize, image_size: usize) -> Result<Vec<f32>> {
    if img.width != image_size || img.height != image_size {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{}, expected {image_size}x{image_size}",
            img.width, img.height
        )));
    }
    if patch == 0 || image_size % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not tile {image_size}"
        )));
    }
    let g = image_size / patch;
    let mut out = Vec::with_capacity(img.data.len());
    for pr in 0..g {
        for pc in 0..g {
            for h in pr * patch..(pr + 1) * patch {
                let start = (h * image_size + pc * patch) * 3;
                out.extend_from_slice(&img.data[start..start + patch * 3]);
            }
        }
    }
    Ok(out)
}

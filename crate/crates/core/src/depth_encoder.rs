//! PointNet-lite depth branch: a 3x3 input transform, a shared per-point
//! MLP, a max-pool over points and a linear projection to the model width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{back_project, normalize_cloud, subsample, CameraIntrinsics, DepthImage};
use crate::nn::Linear;

pub const SHARED_WIDTHS: [usize; 3] = [32, 64, 128];
pub const TNET_WIDTHS: [usize; 2] = [16, 32];
pub const PARAM_BUDGET: usize = 1_500_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoderParams {
    pub tnet: [Linear; 2],
    pub tnet_out: Linear,
    pub shared: [Linear; 3],
    pub projection: Linear,
}

impl DepthEncoderParams {
    /// The transform head starts at zero so the predicted matrix is exactly
    /// the identity before training.
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, d: usize, rng: &mut R) -> Self {
        let tnet = [
            Linear::new(store, &format!("{prefix}.tnet.0"), 3, TNET_WIDTHS[0], true, rng),
            Linear::new(
                store,
                &format!("{prefix}.tnet.1"),
                TNET_WIDTHS[0],
                TNET_WIDTHS[1],
                true,
                rng,
            ),
        ];
        let tnet_out = Linear::zeros(store, &format!("{prefix}.tnet.out"), TNET_WIDTHS[1], 9, true);
        let shared = [
            Linear::new(store, &format!("{prefix}.mlp.0"), 3, SHARED_WIDTHS[0], true, rng),
            Linear::new(
                store,
                &format!("{prefix}.mlp.1"),
                SHARED_WIDTHS[0],
                SHARED_WIDTHS[1],
                true,
                rng,
            ),
            Linear::new(
                store,
                &format!("{prefix}.mlp.2"),
                SHARED_WIDTHS[1],
                SHARED_WIDTHS[2],
                true,
                rng,
            ),
        ];
        let projection = Linear::new(store, &format!("{prefix}.proj"), SHARED_WIDTHS[2], d, true, rng);
        DepthEncoderParams {
            tnet,
            tnet_out,
            shared,
            projection,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tnet.iter().map(Linear::num_params).sum::<usize>()
            + self.tnet_out.num_params()
            + self.shared.iter().map(Linear::num_params).sum::<usize>()
            + self.projection.num_params()
    }

    pub fn width(&self) -> usize {
        self.projection.fan_out
    }

    /// Predict one 3x3 matrix per cloud and apply it: `transformed = points · M`.
    /// `points` is `[B, n, 3]`; returns `([B, 3, 3], [B, n, 3])`.
    pub fn tnet_transform<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, points: Var) -> Result<(Var, Var)> {
        let s = check_points(tape, points)?;
        let b = s[0];
        let mut h = points;
        for layer in &self.tnet {
            h = layer.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.max_over_axis(h, 1)?;
        let delta = self.tnet_out.forward(tape, p, pooled)?;
        let eye = tape.constant(Tensor::<T>::eye(3).reshaped(&[9])?);
        let flat = tape.add(delta, eye)?;
        let m = tape.reshape(flat, &[b, 3, 3])?;
        let transformed = tape.batch_matmul(points, m)?;
        Ok((m, transformed))
    }

    /// Per-point features after the shared MLP, `[B, n, 128]`.
    pub fn point_features<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, points: Var) -> Result<Var> {
        let mut h = points;
        for layer in &self.shared {
            h = layer.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Embed each cloud of `[B, n, 3]` into `[B, d]`. Also returns the
    /// transform matrices for the regularizer.
    pub fn encode_cloud<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, points: Var) -> Result<(Var, Var)> {
        let (m, transformed) = self.tnet_transform(tape, p, points)?;
        let h = self.point_features(tape, p, transformed)?;
        let pooled = tape.max_over_axis(h, 1)?;
        let emb = self.projection.forward(tape, p, pooled)?;
        Ok((emb, m))
    }
}

fn check_points<T: Scalar>(tape: &Tape<T>, points: Var) -> Result<Vec<usize>> {
    let s = tape.shape(points).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::InvalidShape {
            op: "depth_encoder",
            detail: format!("expected [B, n, 3] points, got {:?}", s),
        });
    }
    if s[0] == 0 || s[1] == 0 {
        return Err(Error::ZeroExtent {
            op: "depth_encoder",
            shape: s,
        });
    }
    Ok(s)
}

/// `‖I − M Mᵀ‖²_F` summed over the batch of `[B, 3, 3]` matrices and
/// divided by `B`.
pub fn orthogonality_penalty<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let s = tape.shape(m).to_vec();
    if s.len() != 3 || s[1] != 3 || s[2] != 3 {
        return Err(Error::InvalidShape {
            op: "orthogonality_penalty",
            detail: format!("expected [B, 3, 3], got {:?}", s),
        });
    }
    let mt = tape.transpose_last(m)?;
    let mmt = tape.batch_matmul(m, mt)?;
    let eye = tape.constant(Tensor::<T>::eye(3));
    let diff = tape.sub(eye, mmt)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / s[0] as f64)
}

/// Plain-f64 version of the penalty for one matrix.
pub fn orthogonality_penalty_f64(m: &[[f64; 3]; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (target - dot).powi(2);
        }
    }
    acc
}

/// Depth map to the encoder's input: back-project, subsample `n` points and
/// normalize. Returns a flat `n * 3` buffer.
pub fn prepare_cloud(depth: &DepthImage, k: &CameraIntrinsics, n: usize, seed: u64) -> Result<Vec<f32>> {
    let cloud = back_project(depth, k)?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("depth map has no valid pixels".into()));
    }
    let sampled = subsample(&cloud, n, seed)?;
    Ok(normalize_cloud(&sampled)?.cloud.to_f32())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f32>, DepthEncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = DepthEncoderParams::new(&mut store, "depth", 64, &mut rng);
        (store, enc)
    }

    fn perturb_tnet(store: &mut ParamStore<f32>, enc: &DepthEncoderParams, rng: &mut ChaCha8Rng) {
        let w = store.get_mut(enc.tnet_out.w);
        *w = Tensor::randn(w.shape(), 0.3, rng);
    }

    fn embed(store: &ParamStore<f32>, enc: &DepthEncoderParams, pts: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, n, 3], pts.to_vec()).unwrap());
        let (e, m) = enc.encode_cloud(&mut tape, &p, x).unwrap();
        (tape.value(e).data().to_vec(), tape.value(m).data().to_vec())
    }

    #[test]
    fn identity_init_passes_points_through() {
        let (store, enc) = setup(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Tensor::<f32>::randn(&[2, 10, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(pts.clone());
        let (m, t) = enc.tnet_transform(&mut tape, &p, x).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(tape.value(m).data(), [eye, eye].concat().as_slice());
        assert_eq!(tape.value(t).data(), pts.data());
        let pen = orthogonality_penalty(&mut tape, m).unwrap();
        assert_eq!(tape.value(pen).data()[0], 0.0);
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let (mut store, enc) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        perturb_tnet(&mut store, &enc, &mut rng);
        let n = 50;
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let flat: Vec<f32> = pts.iter().flatten().copied().collect();
        let (e0, m0) = embed(&store, &enc, &flat, n);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        let (e1, m1) = embed(&store, &enc, &shuffled.iter().flatten().copied().collect::<Vec<_>>(), n);
        let doubled: Vec<f32> = pts.iter().chain(pts.iter()).flatten().copied().collect();
        let (e2, _) = embed(&store, &enc, &doubled, 2 * n);
        for i in 0..e0.len() {
            assert!((e0[i] - e1[i]).abs() < 1e-5);
            assert_eq!(e0[i], e2[i]);
        }
        for i in 0..9 {
            assert!((m0[i] - m1[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn single_repeated_point_matches_hand_trace() {
        let (mut store, enc) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        perturb_tnet(&mut store, &enc, &mut rng);
        let pt = [0.3f32, -0.2, 0.7];
        let flat: Vec<f32> = pt.iter().copied().cycle().take(15).collect();
        let (e, m) = embed(&store, &enc, &flat, 5);

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let single = tape.constant(Tensor::new(vec![1, 1, 3], pt.to_vec()).unwrap());
        let mv = tape.constant(Tensor::new(vec![1, 3, 3], m).unwrap());
        let t = tape.batch_matmul(single, mv).unwrap();
        let h = enc.point_features(&mut tape, &p, t).unwrap();
        let h = tape.reshape(h, &[1, SHARED_WIDTHS[2]]).unwrap();
        let out = enc.projection.forward(&mut tape, &p, h).unwrap();
        for (a, b) in e.iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn penalty_examples() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let pz = orthogonality_penalty(&mut tape, zero).unwrap();
        assert!((tape.value(pz).data()[0] - 3.0).abs() < 1e-12);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0];
        let r = tape.constant(Tensor::new(vec![1, 3, 3], rot).unwrap());
        let pr = orthogonality_penalty(&mut tape, r).unwrap();
        assert!(tape.value(pr).data()[0] < 1e-12);
        assert_eq!(orthogonality_penalty_f64(&[[0.0; 3]; 3]), 3.0);
    }

    #[test]
    fn budget_and_empty_input() {
        let (store, enc) = setup(6);
        assert_eq!(enc.num_params(), store.num_elements_with_prefix("depth."));
        assert!(enc.num_params() <= PARAM_BUDGET);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 0, 3]));
        assert!(enc.encode_cloud(&mut tape, &p, x).is_err());
        let bad = tape.constant(Tensor::<f32>::zeros(&[4, 3]));
        assert!(enc.encode_cloud(&mut tape, &p, bad).is_err());
    }
}

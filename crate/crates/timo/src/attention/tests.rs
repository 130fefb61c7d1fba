use super::*;
use crate::nn::{LinearParams, Mode};
use crate::numerics::Tensor;
use crate::validate::{gradcheck_attention, random_grid, random_tensor, stga_oracle_deviation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity_linear(d: usize) -> LinearParams<f64> {
    let mut p = LinearParams::zeros(d, d);
    for i in 0..d {
        p.weight.value.data_mut()[i * d + i] = 1.0;
    }
    p
}

/// Params with zero scores (Wq = Wk = 0) and identity value/output maps,
/// so the attention output is exactly the mean over the key set.
fn averaging_params(kind: AttnKind, dim: usize, heads: usize) -> AttentionParams<f64> {
    AttentionParams {
        kind,
        heads,
        wq: LinearParams::zeros(dim, dim),
        wk: LinearParams::zeros(dim, dim),
        wv: identity_linear(dim),
        wo: identity_linear(dim),
        diff: match kind {
            AttnKind::Dstga => Some((0..heads).map(|_| DiffHead::zeroed(dim / heads)).collect()),
            _ => None,
        },
    }
}

/// `[T, Np, Np, D]` grid made of `t` copies of one random frame.
fn repeated_frame_grid(
    t: usize,
    np: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> TokenGrid<f64> {
    let frame = random_tensor(&[np, np, dim], rng);
    let mut data = Vec::with_capacity(t * frame.numel());
    for _ in 0..t {
        data.extend_from_slice(frame.data());
    }
    TokenGrid::new(
        t,
        np,
        dim,
        Tensor::from_vec(&[t, np, np, dim], data).unwrap(),
    )
    .unwrap()
}

fn max_abs_diff(a: &TokenGrid<f64>, b: &TokenGrid<f64>) -> f64 {
    a.data()
        .data()
        .iter()
        .zip(b.data().data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn mhsa_zero_scores_averages_all_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, np, dim) = (2, 2, 4);
    let x = random_grid(t, np, dim, &mut rng);
    let params = averaging_params(AttnKind::Mhsa, dim, 2);
    let out = mhsa(&x, &params).unwrap();
    let n = x.num_tokens();
    let flat = x.to_flat();
    for c in 0..dim {
        let mean: f64 = (0..n).map(|p| flat.data()[p * dim + c]).sum::<f64>() / n as f64;
        for p in 0..n {
            assert!((out.data().data()[p * dim + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn mhsa_single_token_is_projection_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 6;
    let params = AttentionParams::<f64>::init(AttnKind::Mhsa, dim, 2, &mut rng).unwrap();
    let x = random_grid(1, 1, dim, &mut rng);
    let out = mhsa(&x, &params).unwrap();
    // softmax over one element is 1: out = Wo·(Wv·x + bv) + bo
    let v = params.wv.forward(&x.to_flat()).unwrap();
    let expect = params.wo.forward(&v).unwrap();
    for (a, b) in out.data().data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_matches_naive_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, np, dim, heads) = (2, 3, 8, 2);
    let hd = dim / heads;
    let params = AttentionParams::<f64>::init(AttnKind::Mhsa, dim, heads, &mut rng).unwrap();
    let x = random_grid(t, np, dim, &mut rng);
    let out = mhsa(&x, &params).unwrap();

    // naive per-pair double loop
    let flat = x.to_flat();
    let n = x.num_tokens();
    let q = params.wq.forward(&flat).unwrap();
    let k = params.wk.forward(&flat).unwrap();
    let v = params.wv.forward(&flat).unwrap();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat = vec![0.0f64; n * dim];
    for h in 0..heads {
        for p in 0..n {
            let mut scores = vec![0.0f64; n];
            for key in 0..n {
                let mut s = 0.0;
                for c in 0..hd {
                    s += q.data()[p * dim + h * hd + c] * k.data()[key * dim + h * hd + c];
                }
                scores[key] = s * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..hd {
                let mut acc = 0.0;
                for key in 0..n {
                    acc += exps[key] / z * v.data()[key * dim + h * hd + c];
                }
                concat[p * dim + h * hd + c] = acc;
            }
        }
    }
    let concat = Tensor::from_vec(&[n, dim], concat).unwrap();
    let expect = params.wo.forward(&concat).unwrap();
    for (a, b) in out.data().data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, np, dim) = (2, 2, 8);
    let n = t * np * np;
    let params = AttentionParams::<f64>::init(AttnKind::Mhsa, dim, 2, &mut rng).unwrap();
    let x = random_grid(t, np, dim, &mut rng);
    let out = mhsa(&x, &params).unwrap();

    // joint permutation of the flat token order
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, 3);
    let flat = x.to_flat();
    let mut permuted = Tensor::zeros(&[n, dim]);
    for (new, &old) in perm.iter().enumerate() {
        permuted.data_mut()[new * dim..(new + 1) * dim]
            .copy_from_slice(&flat.data()[old * dim..(old + 1) * dim]);
    }
    let xp = TokenGrid::from_flat(t, np, dim, permuted).unwrap();
    let outp = mhsa(&xp, &params).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..dim {
            let a = outp.data().data()[new * dim + c];
            let b = out.data().data()[old * dim + c];
            assert!((a - b).abs() < 1e-10, "perm equivariance violated");
        }
    }
}

#[test]
fn stga_zero_scores_averages_gyroscope_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, np, dim) = (3, 2, 4);
    let x = random_grid(t, np, dim, &mut rng);
    let params = averaging_params(AttnKind::Stga, dim, 2);
    let idx = GyroscopeIndexSet::build(t, np).unwrap();
    let out = stga(&x, &params, &idx).unwrap();
    let flat = x.to_flat();
    let u = idx.set_size();
    for p in 0..x.num_tokens() {
        for c in 0..dim {
            let mean: f64 = idx
                .row(p)
                .iter()
                .map(|&k| flat.data()[k as usize * dim + c])
                .sum::<f64>()
                / u as f64;
            assert!((out.data().data()[p * dim + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn stga_equals_mhsa_at_t1() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (np, dim, heads) = (3, 8, 2);
    let params = AttentionParams::<f64>::init(AttnKind::Stga, dim, heads, &mut rng).unwrap();
    let x = random_grid(1, np, dim, &mut rng);
    let idx = GyroscopeIndexSet::build(1, np).unwrap();
    let a = stga(&x, &params, &idx).unwrap();
    let b = mhsa(&x, &params).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-6);
}

#[test]
fn stga_matches_masked_oracle() {
    let dev = stga_oracle_deviation(3, 4, 8, 2, 42, 10).unwrap();
    assert!(dev < 1e-6, "max deviation {dev}");
}

#[test]
fn stga_oracle_equals_mhsa_at_t1_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (np, dim) = (3, 8);
    let params = AttentionParams::<f64>::init(AttnKind::Stga, dim, 2, &mut rng).unwrap();
    let x = random_grid(1, np, dim, &mut rng);
    let a = stga_oracle(&x, &params).unwrap();
    let b = mhsa(&x, &params).unwrap();
    assert_eq!(a.data().data(), b.data().data());
}

#[test]
fn stga_oracle_mass_only_on_gyroscope_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, np, dim) = (3, 2, 4);
    let params = AttentionParams::<f64>::init(AttnKind::Stga, dim, 2, &mut rng).unwrap();
    let x = random_grid(t, np, dim, &mut rng);
    let idx = GyroscopeIndexSet::build(t, np).unwrap();
    let n = x.num_tokens();
    for map in stga::stga_oracle_attention(&x, &params).unwrap() {
        for p in 0..n {
            let mut row_sum = 0.0;
            for key in 0..n {
                let w = map.data()[p * n + key];
                row_sum += w;
                if !idx.is_member(p, key) {
                    assert_eq!(w, 0.0, "mass outside gyroscope set");
                } else {
                    assert!(w >= 0.0);
                }
            }
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_output_shapes_match_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, np, dim, heads) = (2, 2, 8, 4);
    let x = random_grid(t, np, dim, &mut rng);
    for kind in [AttnKind::Mhsa, AttnKind::Stga, AttnKind::Dstga] {
        let params = AttentionParams::<f64>::init(kind, dim, heads, &mut rng).unwrap();
        let (out, _) = attention_forward(&x, &params, Mode::Eval).unwrap();
        assert_eq!(out.data().shape(), x.data().shape());
    }
}

#[test]
fn spatial_similarity_identical_frames_reduces_to_median_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, np, hd) = (3, 2, 4);
    let p = np * np;
    let frame_q = random_tensor(&[np, np, hd], &mut rng);
    let frame_k = random_tensor(&[np, np, hd], &mut rng);
    let mut qd = Vec::new();
    let mut kd = Vec::new();
    for _ in 0..t {
        qd.extend_from_slice(frame_q.data());
        kd.extend_from_slice(frame_k.data());
    }
    let q = Tensor::from_vec(&[t, np, np, hd], qd).unwrap();
    let k = Tensor::from_vec(&[t, np, np, hd], kd).unwrap();
    let head = DiffHead::<f64>::init(hd, &mut rng);
    let s = dstga::dstga_spatial_similarity(&q, &k, &head, Mode::Eval).unwrap();
    assert_eq!(s.shape(), &[t, p, p]);
    let scale = 1.0 / (hd as f64).sqrt();
    for ti in 0..t {
        for r in 0..p {
            for j in 0..p {
                let mut i_rj = 0.0;
                for c in 0..hd {
                    i_rj += frame_q.data()[r * hd + c] * frame_k.data()[j * hd + c];
                }
                i_rj *= scale;
                let got = s.data()[(ti * p + r) * p + j];
                assert!((got - i_rj).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn spatial_similarity_zero_projection_ignores_input_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, np, hd) = (4, 2, 3);
    let p = np * np;
    let q = random_tensor(&[t, np, np, hd], &mut rng);
    let k = random_tensor(&[t, np, np, hd], &mut rng);
    let head = DiffHead::<f64>::zeroed(hd);
    for mode in [Mode::Eval, Mode::Train] {
        let s = dstga::dstga_spatial_similarity(&q, &k, &head, mode).unwrap();
        // every S_{:,t} equals I, so all T slices coincide
        for ti in 1..t {
            for e in 0..p * p {
                assert!((s.data()[ti * p * p + e] - s.data()[e]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dstga_rows_sum_to_one_with_gyroscope_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (t, np, dim, heads) = (3, 2, 8, 2);
    let params = AttentionParams::<f64>::init(AttnKind::Dstga, dim, heads, &mut rng).unwrap();
    let x = random_grid(t, np, dim, &mut rng);
    let (_, cache) = dstga::forward(&x, &params, Mode::Train).unwrap();
    let u = t + np * np - 1;
    for hc in cache.attention_maps() {
        assert_eq!(hc.shape()[1], u);
        for row in hc.data().chunks(u) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn dstga_equals_mhsa_at_t1() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (np, dim, heads) = (3, 8, 2);
    let params = AttentionParams::<f64>::init(AttnKind::Dstga, dim, heads, &mut rng).unwrap();
    let x = random_grid(1, np, dim, &mut rng);
    // T=1: zero difference sequence, so attention is the plain spatial
    // softmax over S = QKᵀ/√D'
    let a = dstga(&x, &params, Mode::Eval).unwrap();
    let b = mhsa(&x, &params).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn dstga_equals_stga_on_identical_frames_with_zero_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (t, np, dim, heads) = (3, 3, 8, 2);
    let mut params = AttentionParams::<f64>::init(AttnKind::Dstga, dim, heads, &mut rng).unwrap();
    params.zero_diff_heads();
    let x = repeated_frame_grid(t, np, dim, &mut rng);
    let d_out = dstga(&x, &params, Mode::Eval).unwrap();
    let idx = GyroscopeIndexSet::build(t, np).unwrap();
    let s_out = stga(&x, &params, &idx).unwrap();
    assert!(max_abs_diff(&d_out, &s_out) < 1e-12);
}

#[test]
fn gradcheck_small_attention_instances() {
    for (kind, seed) in [
        (AttnKind::Mhsa, 100),
        (AttnKind::Stga, 101),
        (AttnKind::Dstga, 102),
    ] {
        for mode in [Mode::Train, Mode::Eval] {
            let err = gradcheck_attention(kind, 2, 2, 4, 2, seed, 1e-5, mode).unwrap();
            assert!(err < 1e-6, "{kind:?} {mode:?}: rel err {err}");
        }
    }
}

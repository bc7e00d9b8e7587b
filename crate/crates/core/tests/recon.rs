//! Window attention against hand-computed cases, window bookkeeping, the full network's
//! parameter gradients and checkpoint files.

use dynacq::autodiff::{grad_check, Graph, Tensor, Var};
use dynacq::recon::*;
use dynacq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn rand_wmsa(c: usize, seed: u64) -> WmsaParams {
    WmsaParams {
        qkv_weight: rand_tensor(&[c, 3 * c], seed, 0.8),
        qkv_bias: rand_tensor(&[3 * c], seed + 1, 0.3),
        proj_weight: rand_tensor(&[c, c], seed + 2, 0.8),
        proj_bias: rand_tensor(&[c], seed + 3, 0.3),
    }
}

/// `x W + b` for one row.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols)
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

fn small_cfg() -> ReconConfig {
    ReconConfig {
        channels: 4,
        n_blocks: 1,
        heads: 2,
        window: (2, 4, 4),
        mlp_ratio: 2.0,
    }
}

#[test]
fn single_token_attends_to_itself() {
    let c = 4;
    let p = rand_wmsa(c, 1);
    let x = rand_tensor(&[3, 1, c], 2, 1.0);
    let (out, attn) = wmsa_forward(&x, &p, 2).unwrap();
    assert!(attn.data().iter().all(|a| *a == 1.0));
    for w in 0..3 {
        let row = &x.data()[w * c..(w + 1) * c];
        let qkv = affine(row, &p.qkv_weight, &p.qkv_bias);
        let want = affine(&qkv[2 * c..], &p.proj_weight, &p.proj_bias);
        for j in 0..c {
            assert!((out.data()[w * c + j] - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_give_uniform_weights() {
    let c = 4;
    let p = rand_wmsa(c, 3);
    let tok = [0.3, -0.2, 0.9, 0.1];
    let x = Tensor::new(vec![1, 5, c], tok.iter().cycle().take(5 * c).copied().collect()).unwrap();
    let (out, attn) = wmsa_forward(&x, &p, 2).unwrap();
    assert!(attn.data().iter().all(|a| (a - 0.2).abs() < 1e-15));
    for t in 1..5 {
        assert_eq!(&out.data()[t * c..(t + 1) * c], &out.data()[..c]);
    }
}

#[test]
fn two_token_single_head_oracle() {
    let c = 2;
    let p = rand_wmsa(c, 4);
    let x = rand_tensor(&[1, 2, c], 5, 1.0);
    let (out, attn) = wmsa_forward(&x, &p, 1).unwrap();
    let rows: Vec<Vec<f64>> = (0..2).map(|t| affine(&x.data()[t * c..(t + 1) * c], &p.qkv_weight, &p.qkv_bias)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..2 {
        let q = &rows[i][..c];
        let s: Vec<f64> = (0..2).map(|j| dot(q, &rows[j][c..2 * c]) / (c as f64).sqrt()).collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let a: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
        for j in 0..2 {
            assert!((attn.data()[i * 2 + j] - a[j]).abs() < 1e-14);
        }
        let mixed: Vec<f64> = (0..c).map(|d| a[0] * rows[0][2 * c + d] + a[1] * rows[1][2 * c + d]).collect();
        let want = affine(&mixed, &p.proj_weight, &p.proj_bias);
        for d in 0..c {
            assert!((out.data()[i * c + d] - want[d]).abs() < 1e-13);
        }
    }
}

#[test]
fn rows_are_stochastic() {
    let p = rand_wmsa(8, 6);
    let x = rand_tensor(&[4, 16, 8], 7, 2.0);
    let (_, attn) = wmsa_forward(&x, &p, 4).unwrap();
    for row in attn.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn token_permutation_is_equivariant() {
    let c = 4;
    let p = rand_wmsa(c, 8);
    let x = rand_tensor(&[1, 6, c], 9, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::new(vec![1, 6, c], perm.iter().flat_map(|&i| x.data()[i * c..(i + 1) * c].to_vec()).collect()).unwrap();
    let (o, _) = wmsa_forward(&x, &p, 2).unwrap();
    let (op, _) = wmsa_forward(&xp, &p, 2).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for d in 0..c {
            assert!((op.data()[new * c + d] - o.data()[old * c + d]).abs() < 1e-13);
        }
    }
}

#[test]
fn no_cross_window_leakage() {
    let c = 4;
    let p = rand_wmsa(c, 10);
    let vol = rand_tensor(&[c, 4, 8, 8], 11, 1.0);
    let mut poked = vol.clone();
    // voxel (t=0, y=1, x=2) lies in window 0
    for ch in 0..c {
        poked.data_mut()[ch * 256 + 8 + 2] += 5.0;
    }
    let win = (2, 4, 4);
    let (a, wa) = wmsa_forward(&window_partition(&vol, win).unwrap(), &p, 2).unwrap();
    let (b, wb) = wmsa_forward(&window_partition(&poked, win).unwrap(), &p, 2).unwrap();
    let per = 32 * c;
    assert_ne!(&a.data()[..per], &b.data()[..per]);
    assert_eq!(&a.data()[per..], &b.data()[per..]);
    let per_w = 2 * 32 * 32;
    assert_eq!(&wa.data()[per_w..], &wb.data()[per_w..]);
}

#[test]
fn partition_round_trip_and_layout() {
    let x = rand_tensor(&[3, 4, 8, 12], 12, 1.0);
    let win = (2, 4, 4);
    let t = window_partition(&x, win).unwrap();
    assert_eq!(t.shape(), &[2 * 2 * 3, 32, 3]);
    assert_eq!(window_unpartition(&t, [4, 8, 12], win).unwrap(), x);
    // window (1, 0, 2) of a 2x2x3 grid, token (0, 3, 1) of a 2x4x4 window, channel 2
    let (wi, ti) = (8, 13);
    let (tt, yy, xx) = (2, 3, 9);
    assert_eq!(t.data()[(wi * 32 + ti) * 3 + 2], x.data()[((2 * 4 + tt) * 8 + yy) * 12 + xx]);
    assert!(window_partition(&rand_tensor(&[1, 3, 4, 4], 1, 1.0), win).is_err());
}

#[test]
fn zero_output_weights_emit_the_bias() {
    let cfg = small_cfg();
    let mut params = ReconParams::init(&cfg, 3).unwrap();
    params.get_mut("out_conv.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.get_mut("out_conv.bias").unwrap().data_mut()[0] = 0.37;
    let input = rand_tensor(&[2, 4, 8, 8], 13, 1.0);
    let (out, _) = recon_forward(&input, &cfg, &params, false).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.37));
}

#[test]
fn arbitrary_sequence_lengths() {
    let cfg = small_cfg();
    let params = ReconParams::init(&cfg, 4).unwrap();
    for t in [4, 8, 16, 5] {
        let input = rand_tensor(&[2, t, 8, 6], 14, 1.0);
        let (out, rec) = recon_forward(&input, &cfg, &params, true).unwrap();
        assert_eq!(out.shape(), [t, 8, 6]);
        assert!(out.data().iter().all(|v| v.is_finite()));
        let rec = rec.unwrap();
        assert_eq!(rec.len(), cfg.n_blocks);
        assert_eq!(rec[0].dims, [t, 8, 6]);
    }
}

fn net_loss(g: &mut Graph, cfg: &ReconConfig, params: &ReconParams, probe: (usize, Var), input: &Tensor) -> Result<Var> {
    let mut vars = Vec::new();
    for (i, t) in params.tensors.iter().enumerate() {
        vars.push(if i == probe.0 { probe.1 } else { g.constant(t.clone())? });
    }
    let x = g.constant(input.clone())?;
    let (out, _) = recon_graph(g, x, cfg, &vars, false)?;
    let target = g.constant(rand_tensor(g.shape(out), 15, 1.0))?;
    let d = g.sub(out, target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let mut params = ReconParams::init(&cfg, 5).unwrap();
    // nonzero biases and LN shifts so every path carries signal
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if name.ends_with("bias") || name.ends_with("beta") {
            *t = rand_tensor(t.shape(), 16, 0.2);
        }
    }
    let input = rand_tensor(&[2, 2, 8, 8], 17, 1.0);
    for (i, name) in params.names.iter().enumerate() {
        let err = grad_check(|g, v| net_loss(g, &cfg, &params, (i, v), &input), &params.tensors[i], 1e-5).unwrap();
        assert!(err < 1e-4, "{}: rel err {:e}", name, err);
    }
}

#[test]
fn sixteen_maps_per_segment() {
    let cfg = ReconConfig {
        window: (1, 4, 4),
        ..small_cfg()
    };
    let params = ReconParams::init(&cfg, 6).unwrap();
    let input = rand_tensor(&[2, 2, 16, 16], 18, 1.0);
    let (_, rec) = recon_forward(&input, &cfg, &params, true).unwrap();
    let rec = &rec.unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    let region = AttentionRegion { t: 1, y: 0, x: 0, extent: 16 };
    let info = export_attention(rec, region, None, dir.path()).unwrap();
    assert_eq!(info.maps.len(), 16);
    assert_eq!(info.tokens, 16);
    let csv = std::fs::read_to_string(dir.path().join("attention.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 16 * 16);
    for r in rows {
        let s: f64 = r.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let outside = AttentionRegion { t: 0, y: 8, x: 8, extent: 16 };
    assert!(export_attention(rec, outside, None, dir.path()).is_err());
    assert!(export_attention(rec, region, Some(7), dir.path()).is_err());
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let cfg = small_cfg();
    let params = ReconParams::init(&cfg, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &params).unwrap();
    let (c2, p2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!((c2, p2), (cfg.clone(), params));
    let blob = dir.path().join("params.f64");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn init_is_seeded() {
    let cfg = small_cfg();
    assert_eq!(ReconParams::init(&cfg, 1).unwrap(), ReconParams::init(&cfg, 1).unwrap());
    assert_ne!(ReconParams::init(&cfg, 1).unwrap(), ReconParams::init(&cfg, 2).unwrap());
    assert!(ReconParams::init(&ReconConfig { channels: 5, ..cfg }, 1).is_err());
}

use super::*;
use crate::backbone::{init_params, AttentionTrace};
use crate::data::BOS;
use crate::nn::{matrix, mha, to_rows, Heads};
use candle_core::DType;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    matrix(&v, n, d, DType::F64).unwrap()
}

fn trace(layers: Vec<Vec<Vec<Vec<f64>>>>) -> AttentionTrace {
    AttentionTrace {
        layers: layers
            .into_iter()
            .map(|heads| {
                let (h, n) = (heads.len(), heads[0].len());
                let flat: Vec<f64> = heads.into_iter().flatten().flatten().collect();
                Tensor::from_vec(flat, (h, n, n), &candle_core::Device::Cpu).unwrap()
            })
            .collect(),
    }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    to_rows(a)
        .unwrap()
        .iter()
        .flatten()
        .zip(to_rows(b).unwrap().iter().flatten())
        .all(|(x, y)| (x - y).abs() <= tol)
}

fn silence(p: &crate::nn::ParamStore, names: &[&str]) {
    for n in names {
        p.set(n, &p.get(n).unwrap().zeros_like().unwrap()).unwrap();
    }
}

#[test]
fn identity_rollout_scores_are_flat() {
    let eye: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    let s = accumulate_attention(&trace(vec![vec![eye]])).unwrap();
    assert!(s[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn one_hot_rollout_by_hand() {
    // (A + I)/2 rows: [1, 0, 0], [.5, .5, 0], [.5, 0, .5]; column means 2/3, 1/6, 1/6
    let a = vec![vec![1.0, 0.0, 0.0]; 3];
    let s = accumulate_attention(&trace(vec![vec![a]])).unwrap();
    assert!((s[0][0] - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((s[0][1] - 1.0 / 6.0).abs() < 1e-15);
    assert_eq!(local_indices(&s, 1).unwrap(), vec![0]);
}

#[test]
fn uniform_layers_score_equally() {
    let u = vec![vec![0.2; 5]; 5];
    let s =
        accumulate_attention(&trace(vec![vec![u.clone(), u.clone()], vec![u.clone(), u]])).unwrap();
    for head in s {
        assert!(head.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn non_stochastic_trace_is_rejected() {
    let bad = vec![vec![0.5, 0.4], vec![0.5, 0.5]];
    assert!(matches!(
        accumulate_attention(&trace(vec![vec![bad]])),
        Err(crate::Error::NotStochastic(_))
    ));
    assert!(accumulate_attention(&AttentionTrace::default()).is_err());
}

#[test]
fn top_k_rules() {
    let flat = vec![vec![1.0; 10]; 8];
    let idx = local_indices(&flat, 2).unwrap();
    assert_eq!(idx, [0, 1].repeat(8));
    assert_eq!(local_indices(&[vec![0.1, 0.9, 0.5]], 1).unwrap(), vec![1]);
    assert!(local_indices(&[vec![0.1]], 2).is_err());
}

proptest! {
    #[test]
    fn top_k_ignores_positive_scaling(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..4),
        scale in 1e-3f64..1e3,
        k in 1usize..12,
    ) {
        let scaled: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert_eq!(local_indices(&scores, k).unwrap(), local_indices(&scaled, k).unwrap());
    }

    #[test]
    fn rollout_rows_stay_stochastic(seed in 0u64..1000, layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut mats = Vec::new();
        for _ in 0..layers {
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect();
            mats.push(vec![m]);
        }
        let s = accumulate_attention(&trace(mats)).unwrap();
        // column means of a row-stochastic matrix sum to 1
        prop_assert!((s[0].iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn paper_sized_local_tokens() {
    let cfg = ModelConfig::paper(30);
    let h_v = rows(196, cfg.d, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..196).map(|_| rng.random()).collect())
        .collect();
    let local = local_sample(&h_v, &scores, cfg.k_local).unwrap();
    assert_eq!(local.tokens.dims(), &[48, 512]);
    assert_eq!(local.indices.len(), 48);
}

#[test]
fn caam_cancels_on_degenerate_inputs() {
    let cfg = ModelConfig::tiny(10);
    let p = init_params(&cfg, 1, DType::F64).unwrap();
    let zero = Tensor::zeros((1, cfg.d), DType::F64, p.device()).unwrap();
    let ffn0 = crate::nn::ffn(&p, "vdm.caam.ffn", &zero).unwrap();
    let one = rows(1, cfg.d, 3);
    let want = (&one + &ffn0).unwrap();
    assert!(close(&caam_enhance(&p, &cfg, &one).unwrap(), &want, 1e-15));
    let two = one.repeat((2, 1)).unwrap();
    let want2 = want.repeat((2, 1)).unwrap();
    assert!(close(&caam_enhance(&p, &cfg, &two).unwrap(), &want2, 1e-15));
}

#[test]
fn global_sampling_shapes_and_constants() {
    let cfg = ModelConfig::desk(30);
    let p = init_params(&cfg, 2, DType::F64).unwrap();
    let out = global_sample(&p, &cfg, &rows(196, cfg.d, 4), 1).unwrap();
    assert_eq!(out.dims(), &[49, cfg.d]);

    silence(
        &p,
        &[
            "vdm.global.attn.v.w",
            "vdm.global.attn.v.b",
            "vdm.global.attn.o.b",
            "vdm.global.proj.b",
        ],
    );
    p.set(
        "vdm.global.proj.w",
        &Tensor::eye(cfg.d, DType::F64, p.device()).unwrap(),
    )
    .unwrap();
    let c = rows(1, cfg.d, 5);
    let out = global_sample(&p, &cfg, &c.repeat((196, 1)).unwrap(), 1).unwrap();
    assert!(close(&out, &c.repeat((49, 1)).unwrap(), 1e-15));
}

#[test]
fn pooling_keeps_cell_dominators() {
    let g = 4;
    let d = 3;
    let base = rows(g * g, d, 6);
    let mut field = to_rows(&base).unwrap();
    let mut expected = vec![vec![0.0; d]; 4];
    for cell in 0..4 {
        let (cr, cc) = (cell / 2, cell % 2);
        let winner = (2 * cr + cell % 2) * g + 2 * cc + (cell / 2);
        for j in 0..d {
            field[winner][j] = 10.0 + (cell * d + j) as f64;
            expected[cell][j] = field[winner][j];
        }
    }
    let flat: Vec<f64> = field.into_iter().flatten().collect();
    let pooled = max_pool_grid(&matrix(&flat, g * g, d, DType::F64).unwrap(), g).unwrap();
    assert_eq!(to_rows(&pooled).unwrap(), expected);
    assert!(max_pool_grid(&rows(9, d, 1), 3).is_err());
}

#[test]
fn odd_grid_is_rejected() {
    let mut cfg = ModelConfig::tiny(10);
    let p = init_params(&cfg, 0, DType::F64).unwrap();
    cfg.patch_grid = 3;
    assert!(global_sample(&p, &cfg, &rows(9, cfg.d, 1), 1).is_err());
}

#[test]
fn relative_index_is_centred() {
    let idx = relative_position_index(2);
    assert_eq!(idx.len(), 16);
    // zero offset sits in the centre of the 3 × 3 table
    for i in 0..4 {
        assert_eq!(idx[i * 4 + i], 4);
    }
    assert_eq!(*idx.iter().max().unwrap(), 8);
}

#[test]
fn lgfm_and_ldm_shapes_at_paper_size() {
    let cfg = ModelConfig::paper(30);
    let p = init_params(&cfg, 0, DType::F32).unwrap();
    let local = rows(48, 512, 1).to_dtype(DType::F32).unwrap();
    let global = rows(49, 512, 2).to_dtype(DType::F32).unwrap();
    assert_eq!(lgfm(&p, &cfg, &local, &global).unwrap().dims(), &[48, 512]);
    let m_l = ldm_mediator(&p, &cfg, &local, p.get("embed.tokens").unwrap()).unwrap();
    assert_eq!(m_l.dims(), &[48, 512]);
}

#[test]
fn identical_keys_return_the_value_projection() {
    let cfg = ModelConfig::tiny(10);
    let p = init_params(&cfg, 3, DType::F64).unwrap();
    let q = rows(5, cfg.d, 7);
    let r = rows(1, cfg.d, 8);
    let vo = crate::nn::linear(
        &p,
        "vdm.lgfm.cross_attn.o",
        &crate::nn::linear(&p, "vdm.lgfm.cross_attn.v", &r).unwrap(),
    )
    .unwrap();
    let (cross, _) = mha(
        &p,
        "vdm.lgfm.cross_attn",
        &q,
        &r.repeat((6, 1)).unwrap(),
        None,
        Heads(cfg.heads),
    )
    .unwrap();
    assert!(close(&cross, &vo.repeat((5, 1)).unwrap(), 1e-14));

    // a one-row vocabulary and its duplicate give the same mediator
    let one = ldm_mediator(&p, &cfg, &q, &r).unwrap();
    let two = ldm_mediator(&p, &cfg, &q, &r.repeat((2, 1)).unwrap()).unwrap();
    assert!(close(&one, &two, 1e-14));
}

#[test]
fn fim_degenerate_mediators() {
    let f = rows(4, 6, 9);
    let m = rows(1, 6, 10);
    let e_m = soft_attention(&f, &m, &m, None).unwrap();
    assert!(close(&e_m, &m.repeat((4, 1)).unwrap(), 0.0));

    let zero = Tensor::zeros((3, 6), DType::F64, f.device()).unwrap();
    let out = fim_fuse(&f, &zero).unwrap();
    let mean = f.mean_keepdim(0).unwrap();
    assert!(close(&out, &f.broadcast_add(&mean).unwrap(), 1e-14));
}

#[test]
fn fim_symmetries() {
    let f = rows(5, 6, 11);
    let m = rows(3, 6, 12);
    let pf = Tensor::new(&[3u32, 0, 4, 1, 2], f.device()).unwrap();
    let pm = Tensor::new(&[2u32, 0, 1], f.device()).unwrap();
    let base = fim_fuse(&f, &m).unwrap();
    let permuted = fim_fuse(&f.index_select(&pf, 0).unwrap(), &m).unwrap();
    assert!(close(&base.index_select(&pf, 0).unwrap(), &permuted, 1e-14));
    let shuffled = fim_fuse(&f, &m.index_select(&pm, 0).unwrap()).unwrap();
    assert!(close(&base, &shuffled, 1e-14));
}

#[test]
fn causal_fim_ignores_later_rows() {
    let f = rows(5, 6, 13);
    let m = rows(3, 6, 14);
    let full = to_rows(&fim_fuse_causal(&f, &m).unwrap()).unwrap();
    let head = to_rows(&fim_fuse_causal(&f.narrow(0, 0, 3).unwrap(), &m).unwrap()).unwrap();
    assert_eq!(&full[..3], &head[..]);
    // the last row sees every feature row, as in the non-causal fusion
    let open = to_rows(&fim_fuse(&f, &m).unwrap()).unwrap();
    for (a, b) in full[4].iter().zip(&open[4]) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn tiny_image(seed: u64) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RawImage::new(1, 64, 64, (0..64 * 64).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn forward_shapes_in_both_modes() {
    let cfg = ModelConfig::tiny(12);
    let p = init_params(&cfg, 5, DType::F64).unwrap();
    let img = [tiny_image(1)];
    for mode in [Mode::Baseline, Mode::Vlci] {
        assert_eq!(
            vlci_forward(&p, &cfg, &img, &[BOS], mode).unwrap().dims(),
            &[1, 12]
        );
        assert_eq!(
            vlci_forward(&p, &cfg, &img, &[BOS, 6, 7], mode)
                .unwrap()
                .dims(),
            &[3, 12]
        );
    }
    let two = [tiny_image(2), tiny_image(3)];
    let ctx = visual_context(&p, &cfg, &two, Mode::Vlci).unwrap();
    let m = ctx.mediators.as_ref().unwrap();
    assert_eq!(m.local.len(), cfg.k_local * cfg.heads);
    assert_eq!(m.global.dims(), &[2 * 4, cfg.d]);
    let dump = serde_json::to_string(&m.trace().unwrap()).unwrap();
    assert!(dump.contains("\"selected\""));
}

#[test]
fn silenced_mediators_reduce_to_baseline_plus_means() {
    let cfg = ModelConfig::tiny(12);
    let p = init_params(&cfg, 6, DType::F64).unwrap();
    silence(
        &p,
        &[
            "vdm.lgfm.ffn.fc2.w",
            "vdm.lgfm.ffn.fc2.b",
            "ldm.ffn2.fc2.w",
            "ldm.ffn2.fc2.b",
        ],
    );
    let img = [tiny_image(4)];
    let prefix = [BOS, 6, 8, 7];
    let got = vlci_forward(&p, &cfg, &img, &prefix, Mode::Vlci).unwrap();

    let base = visual_context(&p, &cfg, &img, Mode::Baseline).unwrap();
    let h_v = &base.memory;
    let memory = h_v.broadcast_add(&h_v.mean_keepdim(0).unwrap()).unwrap();
    let text = to_rows(&embed_ids(&p, &prefix, 0).unwrap()).unwrap();
    let mut shifted = Vec::new();
    for i in 0..text.len() {
        for j in 0..cfg.d {
            let mean = (0..=i).map(|r| text[r][j]).sum::<f64>() / (i + 1) as f64;
            shifted.push(text[i][j] + mean);
        }
    }
    let text = matrix(&shifted, prefix.len(), cfg.d, DType::F64).unwrap();
    let want = multiway_decode(&p, &cfg, &text, Some(&memory)).unwrap();
    assert!(close(&got, &want, 1e-10));
}

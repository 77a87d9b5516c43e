//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned.
//! Exits non-zero when any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use hci_core::aux_caption::{augment_pairs, co_attend, AcLevel, CoAttentionParams, FusionConfig};
use hci_core::embedding_io::{
    decode_heb, encode_heb, generate_synthetic, read_bundle, write_bundle, Bundle,
    EmbeddingSequence, Modality, PairRecord, Split, SyntheticConfig, EMBEDDINGS_FILE, PAIRS_FILE,
};
use hci_core::gradient_suite::{gradient_suite, GRAD_TOLERANCE};
use hci_core::hierarchy::{aggregate, aggregation_weights, mlp_h, AggregatorParams, SoftmaxAxis};
use hci_core::losses::{nt_xent, LossConfig};
use hci_core::model::{Model, ModelConfig};
use hci_core::retrieval_eval::{evaluate, recall_at_k, recalls};
use hci_core::rng::Rng;
use hci_core::similarity::{ci_value, pairwise_ci_matrix, ScoreConfig, ScoreMode};
use hci_core::trainer::{fit, Checkpoint, TrainConfig};
use hci_core::{ParamStore, Tape, Tensor};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], rng.gaussian_vec(rows * cols, 1.0)).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(a, b) / (dot(a, a).sqrt().max(1e-12) * dot(b, b).sqrt().max(1e-12))
}

/// Double-loop symmetric max-mean.
fn ci_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut b_to_a = 0.0;
    for n in 0..b.rows() {
        let mut best = f64::NEG_INFINITY;
        for m in 0..a.rows() {
            best = best.max(cos(a.row(m), b.row(n)));
        }
        b_to_a += best;
    }
    let mut a_to_b = 0.0;
    for m in 0..a.rows() {
        let mut best = f64::NEG_INFINITY;
        for n in 0..b.rows() {
            best = best.max(cos(a.row(m), b.row(n)));
        }
        a_to_b += best;
    }
    (b_to_a / b.rows() as f64 + a_to_b / a.rows() as f64) / 2.0
}

fn permute_rows(t: &Tensor, rng: &mut Rng) -> Tensor {
    let mut order: Vec<usize> = (0..t.rows()).collect();
    rng.shuffle(&mut order);
    let rows: Vec<Vec<f64>> = order.iter().map(|&r| t.row(r).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradient_criterion() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_case = "";
    let mut cases = 0;
    for seed in 0..20 {
        match gradient_suite(seed) {
            Ok(results) => {
                for c in results {
                    cases += 1;
                    if c.max_rel_error > worst {
                        worst = c.max_rel_error;
                        worst_case = c.name;
                    }
                }
            }
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= GRAD_TOLERANCE && elapsed < Duration::from_secs(30),
        format!(
            "{cases} checks over 20 seeds, max rel error {worst:.2e} ({worst_case}) <= 1e-4, {:.1} s < 30 s",
            elapsed.as_secs_f64()
        ),
    )
}

fn closed_form_criterion() -> Verdict {
    let tau = 0.07;
    let loss = |rows: Vec<Vec<f64>>| {
        let tape = Tape::new();
        nt_xent(tape.constant(Tensor::from_rows(&rows).unwrap()), tau)
            .unwrap()
            .item()
    };
    let mut ok = true;
    for s in [-1.0, 0.0, 0.37, 1.0, 5.0] {
        ok &= loss(vec![vec![s]]) == 0.0;
    }
    let mut worst_const = 0.0f64;
    let mut worst_eye = 0.0f64;
    for n in 2..=8 {
        for c in [-0.5, 0.0, 0.3, 1.0] {
            let v = loss(vec![vec![c; n]; n]);
            worst_const = worst_const.max((v - 2.0 * (n as f64).ln()).abs());
        }
        let eye = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let expected = 2.0 * (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln();
        worst_eye = worst_eye.max((loss(eye) - expected).abs() / expected);
    }
    ok &= worst_const <= 1e-9 && worst_eye <= 1e-9;
    verdict(
        ok,
        format!("N=1 exactly 0; constant |err| {worst_const:.1e} <= 1e-9; identity-like rel err {worst_eye:.1e} <= 1e-9"),
    )
}

fn ci_criterion() -> Verdict {
    let mut rng = Rng::new(2024);
    let (mut oracle, mut batch, mut invariance, mut self_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut symmetric = true;
    for _ in 0..100 {
        let d = 1 + rng.below(8);
        let ra = 1 + rng.below(8);
        let a = random_tensor(&mut rng, ra, d);
        let rb = 1 + rng.below(8);
        let b = random_tensor(&mut rng, rb, d);
        let v = ci_value(&a, &b).unwrap();
        oracle = oracle.max((v - ci_oracle(&a, &b)).abs());
        symmetric &= v == ci_value(&b, &a).unwrap();

        let pa = permute_rows(&a, &mut rng);
        let pb = permute_rows(&b, &mut rng);
        invariance = invariance.max((ci_value(&pa, &pb).unwrap() - v).abs());
        let scales: Vec<f64> = (0..a.rows()).map(|_| 0.01 + 10.0 * rng.uniform()).collect();
        let scaled = Tensor::from_rows(
            &(0..a.rows())
                .map(|r| a.row(r).iter().map(|x| x * scales[r]).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        invariance = invariance.max((ci_value(&scaled, &b).unwrap() - v).abs());

        let unit = a.l2_normalize_rows().0;
        self_err = self_err.max((ci_value(&unit, &unit).unwrap() - 1.0).abs());

        let sets_a: Vec<Tensor> = (0..3)
            .map(|_| {
                let r = 1 + rng.below(8);
                random_tensor(&mut rng, r, d)
            })
            .collect();
        let sets_b: Vec<Tensor> = (0..3)
            .map(|_| {
                let r = 1 + rng.below(8);
                random_tensor(&mut rng, r, d)
            })
            .collect();
        let tape = Tape::new();
        let va: Vec<_> = sets_a.iter().map(|t| tape.constant(t.clone())).collect();
        let vb: Vec<_> = sets_b.iter().map(|t| tape.constant(t.clone())).collect();
        let m = pairwise_ci_matrix(&va, &vb).unwrap().value();
        for i in 0..3 {
            for j in 0..3 {
                batch = batch.max((m.get2(i, j) - ci_oracle(&sets_a[i], &sets_b[j])).abs());
            }
        }
    }
    verdict(
        oracle <= 1e-12 && batch <= 1e-12 && self_err <= 1e-12 && invariance <= 1e-12 && symmetric,
        format!(
            "100 instances: ci vs oracle {oracle:.1e}, pairwise matrix {batch:.1e}, ci(X,X)-1 {self_err:.1e}, \
             permutation/scale {invariance:.1e} (all <= 1e-12), symmetry bit-exact: {symmetric}"
        ),
    )
}

fn aggregation_criterion() -> Verdict {
    let mut rng = Rng::new(77);
    let (mut perm, mut cols, mut uniform) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = 1 + rng.below(8);
        let r = 1 + rng.below(8);
        let slots = 1 + rng.below(5);
        let mut store = ParamStore::new();
        let agg = AggregatorParams::init(&mut store, "agg", d, slots, &mut rng).unwrap();
        let x = random_tensor(&mut rng, r, d);
        let px = permute_rows(&x, &mut rng);
        let tape = Tape::new();
        let bound = agg.bind(&tape, &store);
        let out = aggregate(tape.constant(x.clone()), &bound, SoftmaxAxis::Rows)
            .unwrap()
            .value();
        let pout = aggregate(tape.constant(px), &bound, SoftmaxAxis::Rows)
            .unwrap()
            .value();
        perm = perm.max(max_diff(&out, &pout));
        let w = aggregation_weights(tape.constant(x.clone()), &bound, SoftmaxAxis::Rows)
            .unwrap()
            .value();
        for s in w.sum_axis(0).unwrap().data() {
            cols = cols.max((s - 1.0).abs());
        }

        *store.value_mut(agg.w) = Tensor::zeros(&[d, slots]);
        let tape = Tape::new();
        let bound = agg.bind(&tape, &store);
        let pooled = aggregate(tape.constant(x.clone()), &bound, SoftmaxAxis::Rows)
            .unwrap()
            .value();
        let hx = mlp_h(tape.constant(x), &bound.h).unwrap().value();
        for c in 0..d {
            let mean = (0..r).map(|i| hx.get2(i, c)).sum::<f64>() / r as f64;
            for s in 0..slots {
                uniform = uniform.max((pooled.get2(s, c) - mean).abs());
            }
        }
    }
    verdict(
        perm <= 1e-12 && cols <= 1e-9 && uniform <= 1e-12,
        format!(
            "100 instances: permutation {perm:.1e} <= 1e-12, weight columns {cols:.1e} <= 1e-9, \
             W=0 vs column means of h(X) {uniform:.1e} <= 1e-12"
        ),
    )
}

const TRAIN_LR: f64 = 1e-2;

fn clip_sentence_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: TRAIN_LR,
        ..TrainConfig::new(16)
    }
}

fn clip_sentence_scores() -> ScoreConfig {
    ScoreConfig {
        mode: ScoreMode::ClipSentenceOnly,
        ..ScoreConfig::default()
    }
}

fn test_r1(model: &Model, bundle: &Bundle, score: &ScoreConfig, fusion: &FusionConfig) -> f64 {
    evaluate(model, bundle, Split::Test, score, fusion)
        .unwrap()
        .text_to_audio
        .r1
}

fn end_to_end_criterion() -> Verdict {
    let start = Instant::now();
    let mut r1s = Vec::new();
    for seed in 0..3 {
        let bundle = generate_synthetic(&SyntheticConfig {
            items: 64,
            classes: 8,
            dim: 16,
            sigma: 0.05,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let trained = fit(&bundle, &clip_sentence_config(seed)).unwrap();
        r1s.push(test_r1(
            &trained.model,
            &bundle,
            &clip_sentence_scores(),
            &FusionConfig::default(),
        ));
    }
    let elapsed = start.elapsed();
    let min = r1s.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        min >= 0.9 && elapsed < Duration::from_secs(120),
        format!(
            "L_cs, 50 epochs, lr {TRAIN_LR}: test text-to-audio R@1 per seed {r1s:?} (min >= 0.90), {:.1} s < 120 s",
            elapsed.as_secs_f64()
        ),
    )
}

fn hci_criterion() -> Verdict {
    let (mut cs, mut hci) = (0.0, 0.0);
    for seed in 0..5 {
        let bundle = generate_synthetic(&SyntheticConfig {
            sigma: 0.2,
            segments: 4,
            offset_scale: 0.5,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let base = clip_sentence_config(seed);
        let m = fit(&bundle, &base).unwrap().model;
        cs += test_r1(
            &m,
            &bundle,
            &clip_sentence_scores(),
            &FusionConfig::default(),
        );
        let full = TrainConfig {
            loss: LossConfig::default(),
            ..base
        };
        let m = fit(&bundle, &full).unwrap().model;
        hci += test_r1(
            &m,
            &bundle,
            &ScoreConfig::default(),
            &FusionConfig::default(),
        );
    }
    let (cs, hci) = (cs / 5.0, hci / 5.0);
    verdict(
        hci >= cs,
        format!("sigma 0.2 with segment offsets, 5 seeds: mean R@1 L_hci {hci:.3} >= L_cs {cs:.3}"),
    )
}

fn tcm_criterion() -> Verdict {
    let (mut audio_only, mut tcm) = (0.0, 0.0);
    let fused = FusionConfig {
        lambda: 1.0,
        enabled: true,
    };
    for seed in 0..5 {
        let bundle = generate_synthetic(&SyntheticConfig {
            sigma: 0.05,
            audio_sigma: Some(0.4),
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let base = clip_sentence_config(seed);
        let m = fit(&bundle, &base).unwrap().model;
        audio_only += test_r1(
            &m,
            &bundle,
            &clip_sentence_scores(),
            &FusionConfig::default(),
        );
        let mut ac = base;
        ac.model.ac.level = AcLevel::DaAcfiTcm;
        let m = fit(&bundle, &ac).unwrap().model;
        tcm += test_r1(&m, &bundle, &clip_sentence_scores(), &fused);
    }
    let (audio_only, tcm) = (audio_only / 5.0, tcm / 5.0);
    verdict(
        tcm >= audio_only,
        format!("audio sigma 0.4, 5 seeds: mean R@1 with TCM (lambda 1) {tcm:.3} >= audio-only {audio_only:.3}"),
    )
}

/// The synthetic bundle with captions detached from every pair whose index
/// satisfies `drop`.
fn with_dropped_captions(bundle: &Bundle, drop: impl Fn(usize) -> bool) -> Bundle {
    let pairs: Vec<PairRecord> = bundle
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| PairRecord {
            caption_id: if drop(i) { None } else { p.caption_id.clone() },
            ..p.clone()
        })
        .collect();
    Bundle::new(bundle.dim(), bundle.sequences().to_vec(), pairs).unwrap()
}

fn augmentation_criterion() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let full = generate_synthetic(&SyntheticConfig {
            seed,
            items: 20 + 7 * seed as usize,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let stride = 2 + seed as usize % 3;
        let partial = with_dropped_captions(&full, |i| i % stride == 0);
        for (bundle, label) in [(&full, "full"), (&partial, "partial")] {
            let before = bundle.clone();
            let n = bundle.split_pairs(Split::Train).len();
            let c = bundle
                .split_pairs(Split::Train)
                .iter()
                .filter(|p| p.caption_id.is_some())
                .count();
            let aug = augment_pairs(bundle, Split::Train);
            let distinct: HashSet<_> = aug.iter().map(|p| (&p.audio_id, &p.text_id)).collect();
            ok &= aug.len() == n + c && distinct.len() == aug.len() && *bundle == before;
            if label == "full" {
                ok &= aug.len() == 2 * n;
            }
            if seed == 0 {
                notes.push(format!(
                    "{label}: N={n}, captioned={c}, augmented={}",
                    aug.len()
                ));
            }
        }
    }
    verdict(
        ok,
        format!("10 bundles x 2 caption patterns: size = N + captioned (2N when full), no duplicates, source unchanged [{}]", notes.join("; ")),
    )
}

fn co_attention_criterion() -> Verdict {
    let mut rng = Rng::new(9);
    let mut identity = true;
    let mut unit = true;
    for (dim, heads) in [(4, 1), (4, 2), (8, 2), (8, 4), (16, 4)] {
        for _ in 0..5 {
            let nf = 1 + rng.below(8);
            let nc = 1 + rng.below(4);
            let mut store = ParamStore::new();
            let zero = CoAttentionParams::init(&mut store, "zero", dim, heads, &mut rng).unwrap();
            let dense =
                CoAttentionParams::init_dense(&mut store, "dense", dim, heads, &mut rng).unwrap();
            let frames = random_tensor(&mut rng, nf, dim);
            let caption = random_tensor(&mut rng, nc, dim);
            let one = random_tensor(&mut rng, 1, dim);
            let tape = Tape::new();
            let out = co_attend(
                tape.constant(frames.clone()),
                tape.constant(caption),
                &zero.bind(&tape, &store),
            )
            .unwrap();
            identity &= out.output.value() == frames;
            for p in [&zero, &dense] {
                let out = co_attend(
                    tape.constant(frames.clone()),
                    tape.constant(one.clone()),
                    &p.bind(&tape, &store),
                )
                .unwrap();
                unit &= out
                    .cross_weights
                    .iter()
                    .all(|w| w.value().data().iter().all(|&v| v == 1.0));
            }
        }
    }
    verdict(
        identity && unit,
        format!("25 cases: zero-init output == input bit-for-bit: {identity}; single-token weights == 1.0 exactly: {unit}"),
    )
}

fn random_bundle(seed: u64) -> Bundle {
    let mut rng = Rng::new(seed);
    let dim = 1 + rng.below(8);
    let mut seqs = Vec::new();
    let mut pairs = Vec::new();
    let values = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gaussian() as f32 as f64).collect()
    };
    for k in 0..1 + rng.below(20) {
        let (a, t, c) = (format!("a{k}"), format!("t{k}"), format!("c{k}"));
        let nf = 1 + rng.below(6);
        seqs.push(EmbeddingSequence {
            item_id: a.clone(),
            modality: Modality::Audio,
            matrix: Tensor::new(vec![nf, dim], values(&mut rng, nf * dim)).unwrap(),
            cls: None,
        });
        let nw = 1 + rng.below(6);
        seqs.push(EmbeddingSequence {
            item_id: t.clone(),
            modality: Modality::Text,
            matrix: Tensor::new(vec![nw, dim], values(&mut rng, nw * dim)).unwrap(),
            cls: Some(Tensor::new(vec![1, dim], values(&mut rng, dim)).unwrap()),
        });
        let captioned = rng.below(4) > 0;
        if captioned {
            seqs.push(EmbeddingSequence {
                item_id: c.clone(),
                modality: Modality::Caption,
                matrix: Tensor::new(vec![1, dim], values(&mut rng, dim)).unwrap(),
                cls: None,
            });
        }
        pairs.push(PairRecord {
            split: Split::from_hash(&a),
            audio_id: a,
            text_id: t,
            caption_id: captioned.then_some(c),
        });
    }
    Bundle::new(dim, seqs, pairs).unwrap()
}

fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = Rng::new(seed);
    let mut config = ModelConfig::new([4, 8, 16][rng.below(3)]);
    config.hierarchy.segments = 1 + rng.below(6);
    config.hierarchy.phrases = 1 + rng.below(6);
    config.hierarchy.projection_enabled = rng.below(2) == 0;
    config.ac.level = [AcLevel::Off, AcLevel::DaAcfi, AcLevel::DaAcfiTcm][rng.below(3)];
    config.ac.heads = [1, 2, 4][rng.below(3)];
    let train = (rng.below(2) == 0).then(|| TrainConfig::new(config.dim()));
    Checkpoint::from_model(&Model::init(config, seed).unwrap(), train, seed)
}

fn cli_code(args: &[&str]) -> i32 {
    let argv = std::iter::once("hci").chain(args.iter().copied());
    hci_cli::run(argv, &mut std::io::sink(), &mut std::io::sink())
}

fn serialization_criterion() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut heb_ok = 0;
    let mut ckpt_ok = 0;
    for seed in 0..50 {
        let b = random_bundle(seed);
        let first = tmp.path().join(format!("b{seed}"));
        let again = tmp.path().join(format!("b{seed}-again"));
        write_bundle(&b, &first).unwrap();
        let loaded = read_bundle(&first).unwrap();
        write_bundle(&loaded, &again).unwrap();
        let same = |f: &str| {
            std::fs::read(first.join(f)).unwrap() == std::fs::read(again.join(f)).unwrap()
        };
        let bytes = encode_heb(b.dim(), b.sequences()).unwrap();
        let (d, seqs) = decode_heb(&bytes).unwrap();
        if loaded == b
            && same(EMBEDDINGS_FILE)
            && same(PAIRS_FILE)
            && encode_heb(d, &seqs).unwrap() == bytes
        {
            heb_ok += 1;
        }

        let ck = random_checkpoint(seed);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        if back == ck
            && back.encode().unwrap() == bytes
            && back.model().unwrap().named_params() == ck.params
        {
            ckpt_ok += 1;
        }
    }

    let d = tmp.path().join("cli");
    let d_str = d.to_str().unwrap();
    let mut codes = Vec::new();
    codes.push(cli_code(&[
        "synth", "--out", d_str, "--items", "24", "--seed", "1",
    ]));
    let ck = tmp.path().join("ck.bin");
    let ck_str = ck.to_str().unwrap();
    codes.push(cli_code(&[
        "train", "--data", d_str, "--epochs", "1", "--out", ck_str,
    ]));
    let setup_ok = codes.iter().all(|&c| c == 0);

    let mut rejected = Vec::new();
    let bytes = std::fs::read(&ck).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0x55;
    for (name, content) in [
        ("magic.bin", bad_magic),
        ("truncated.bin", bytes[..bytes.len() / 3].to_vec()),
        ("empty.bin", Vec::new()),
    ] {
        let p = tmp.path().join(name);
        std::fs::write(&p, content).unwrap();
        rejected.push(cli_code(&[
            "eval",
            "--data",
            d_str,
            "--ckpt",
            p.to_str().unwrap(),
        ]));
    }
    let heb_path = d.join(EMBEDDINGS_FILE);
    let heb = std::fs::read(&heb_path).unwrap();
    let mut bad = heb.clone();
    bad[2] ^= 0x55;
    for content in [bad, heb[..heb.len() - 5].to_vec()] {
        std::fs::write(&heb_path, content).unwrap();
        rejected.push(cli_code(&["inspect", "--data", d_str]));
    }
    std::fs::write(&heb_path, &heb).unwrap();
    std::fs::write(d.join(PAIRS_FILE), b"[{\"audio_id\": 3}]").unwrap();
    rejected.push(cli_code(&["inspect", "--data", d_str]));

    let all_three = rejected.iter().all(|&c| c == 3);
    verdict(
        heb_ok == 50 && ckpt_ok == 50 && setup_ok && all_three,
        format!(
            "byte-identical round trips: bundles {heb_ok}/50, checkpoints {ckpt_ok}/50; \
             corrupted checkpoint/embeddings/pairs exit codes {rejected:?} (all 3)"
        ),
    )
}

fn eval_protocol_criterion() -> Verdict {
    let mut rng = Rng::new(31);
    let (mut monotone, mut invariant, mut reduces) = (true, true, true);
    for _ in 0..200 {
        let q = 1 + rng.below(10);
        let c = 1 + rng.below(12);
        // Coarse values force ties so the tie rule is exercised.
        let data = (0..q * c)
            .map(|_| (rng.below(7) as f64 - 3.0) / 3.0)
            .collect();
        let s = Tensor::new(vec![q, c], data).unwrap();
        let multi: Vec<Vec<usize>> = (0..q)
            .map(|_| {
                let mut p: Vec<usize> = (0..1 + rng.below(3)).map(|_| rng.below(c)).collect();
                p.sort_unstable();
                p.dedup();
                p
            })
            .collect();
        let ks = [1, 2, 3, 5, 10, 20];
        let r = recalls(&s, &multi, &ks).unwrap();
        monotone &= r.windows(2).all(|w| w[0] <= w[1]);
        for f in [|x: f64| x.exp(), |x: f64| 2.0 * x + 1.0, |x: f64| x.powi(3)] {
            invariant &= recalls(&s.map(f), &multi, &ks).unwrap() == r;
        }
        let single: Vec<Vec<usize>> = multi.iter().map(|p| vec![p[0]]).collect();
        for &k in &ks {
            let mut hits = 0;
            for (i, p) in single.iter().enumerate() {
                let row = s.row(i);
                let mut order: Vec<usize> = (0..c).collect();
                // pessimistic: the positive sorts after every tied competitor
                order.sort_by(|&a, &b| {
                    row[b]
                        .partial_cmp(&row[a])
                        .unwrap()
                        .then_with(|| (a == p[0]).cmp(&(b == p[0])))
                });
                if order.iter().position(|&j| j == p[0]).unwrap() < k {
                    hits += 1;
                }
            }
            reduces &= recall_at_k(&s, &single, k).unwrap() == hits as f64 / q as f64;
        }
    }
    verdict(
        monotone && invariant && reduces,
        format!(
            "200 tied score matrices: monotone in k: {monotone}; invariant under exp, affine, cube: {invariant}; \
             single positive equals sort-based R@k: {reduces}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("gradient suite", gradient_criterion),
        ("closed-form loss values", closed_form_criterion),
        ("CI oracle equivalence", ci_criterion),
        ("aggregation properties", aggregation_criterion),
        ("end-to-end synthetic retrieval", end_to_end_criterion),
        ("HCI directional check", hci_criterion),
        ("AC directional check", tcm_criterion),
        ("augmentation count", augmentation_criterion),
        ("co-attention identity", co_attention_criterion),
        ("serialization", serialization_criterion),
        ("evaluation protocol", eval_protocol_criterion),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.passed {
            failed += 1;
        }
        println!(
            "{} {:>2}. {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 1 and 2 read ATIS / SNIPS from `CASA_ATIS_DIR` / `CASA_SNIPS_DIR`
//! (each holding `train.txt` and `test.txt` in the flat token/tag format).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use casa_nlu::context_fusion::{fuse_context, SignalParams};
use casa_nlu::data::vocab::PAD_ID;
use casa_nlu::data::{
    generate_records, load_flat_icsl, read_conversational_jsonl, save_conversational_jsonl, validate_bio,
    ConversationRecord, Dataset, Profile, Split, TurnRecord,
};
use casa_nlu::encoder::{
    encode_utterance, fusion_gate, s2t_attention, t2t_directional_attention, Direction, EncoderParams, S2tParams,
};
use casa_nlu::gradcheck::gradient_check;
use casa_nlu::model::{Model, ModelDims, ModelVariant, SignalFlags};
use casa_nlu::tensor::{Graph, Mat, ParamStore};
use casa_nlu::training::{evaluate, run_ablation, run_seeds, train, HistoryPolicy, Hyperparams, MetricsReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u8, name: &'static str, pass: bool, detail: String) -> Verdict {
    println!("{} {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, name, pass, detail }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut verdicts = vec![
        gradients(),
        oracles(),
        invariants(),
        overfit(),
        benchmark(1, "ATIS IC", "CASA_ATIS_DIR", 94.0, 92.0, 18, Some((Split::Train, 4978))),
        benchmark(2, "SNIPS IC", "CASA_SNIPS_DIR", 97.0, 97.0, 7, Some((Split::Test, 700))),
    ];
    verdicts.extend(contextual());
    verdicts.push(ablation());
    verdicts.sort_by_key(|v| v.id);

    println!("\nsummary ({:.0} s)", start.elapsed().as_secs_f64());
    for v in &verdicts {
        println!("{} {} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    }
    if verdicts.iter().all(|v| v.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- criterion 6

fn toy_turn(text: &str, intent: &str, slots: &[&str], da: &str) -> TurnRecord {
    TurnRecord::from_text(text, intent, slots.iter().map(|s| s.to_string()).collect(), da)
}

fn toy_dataset() -> Dataset {
    let recs = vec![
        ConversationRecord {
            id: "a".into(),
            turns: vec![
                toy_turn("move to elm street", "Move", &["O", "O", "B-addr", "I-addr"], "Inform"),
                toy_turn("on friday", "Move", &["O", "B-date"], "ElicitSlot"),
                toy_turn("yes", "Move", &["O"], "Confirm"),
                toy_turn("cancel it now", "Cancel", &["O", "O", "O"], "Close"),
            ],
        },
        ConversationRecord {
            id: "b".into(),
            turns: vec![
                toy_turn("cancel friday", "Cancel", &["O", "B-date"], "Inform"),
                toy_turn("elm street", "Move", &["B-addr", "I-addr"], "ElicitSlot"),
            ],
        },
    ];
    Dataset::from_records(&recs, Split::Train, None).expect("toy dataset")
}

fn gradients() -> Verdict {
    const NAME: &str = "full-model gradient check";
    let start = Instant::now();
    let data = toy_dataset();
    let sizes = (data.vocabs.intents.len(), data.vocabs.slot_labels.len());
    let mut model = Model::new(ModelDims::toy(), ModelVariant::casa(), data.vocabs.clone(), 3).expect("model");
    let mut k = 0.0f64;
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).ends_with("bias") {
            model.store.value_mut(id).mapv_inplace(|_| {
                k += 0.37;
                k.sin() * 0.3
            });
        }
    }
    let check = match gradient_check(&model, &data, 0.9, 0.9, 1e-4) {
        Ok(r) => r,
        Err(e) => return report(6, NAME, false, format!("check failed: {e}")),
    };
    let elapsed = start.elapsed();
    let untouched: Vec<&str> = check.tensors.iter().filter(|t| t.max_grad == 0.0).map(|t| t.name.as_str()).collect();
    let worst = check.worst().map(|t| format!("{} {:.2e}", t.name, t.max_rel_error)).unwrap_or_default();
    let pass = sizes == (3, 4)
        && check.tensors.len() == model.store.len()
        && untouched.is_empty()
        && check.max_rel_error() < 1e-4
        && elapsed < Duration::from_secs(60);
    report(
        6,
        NAME,
        pass,
        format!(
            "{} tensors, |I|={} |S|={}, worst {worst} (< 1e-4), untouched {:?}, {:.1} s (< 60 s)",
            check.tensors.len(),
            sizes.0,
            sizes.1,
            untouched,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).mapv_inplace(|_| rng.gen_range(-1.5..1.5));
    }
}

/// Loop version of the per-dimension softmax-weighted sum over `rows`.
fn loop_s2t(rows: &[Vec<f64>], store: &ParamStore, p: &S2tParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (wh, b, ws) = (store.value(p.hidden), store.value(p.hidden_bias), store.value(p.score));
    let dim = rows[0].len();
    let scores: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let act: Vec<f64> = (0..wh.ncols())
                .map(|c| sig((0..dim).map(|k| x[k] * wh[[k, c]]).sum::<f64>() + b[[0, c]]))
                .collect();
            (0..ws.ncols()).map(|c| (0..act.len()).map(|k| act[k] * ws[[k, c]]).sum()).collect()
        })
        .collect();
    let mut out = vec![0.0; dim];
    let mut weights = vec![vec![0.0; dim]; rows.len()];
    for d in 0..dim {
        let m = scores.iter().map(|s| s[d]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s[d] - m).exp()).sum();
        for t in 0..rows.len() {
            weights[t][d] = (scores[t][d] - m).exp() / z;
            out[d] += weights[t][d] * rows[t][d];
        }
    }
    (out, weights)
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut worst_s2t = 0.0f64;
    for case in 0..100 {
        let k = 3;
        let mut store = ParamStore::new();
        let p = S2tParams::init(&mut store, "s2t", 4, &mut rng);
        randomize(&mut store, &mut rng);
        let c = random_mat(&mut rng, k, 4, 2.0);
        let len = 1 + case % k;
        let mask: Vec<bool> = (0..k).map(|j| j < len).collect();
        let got = s2t_attention(&c, &mask, &store, &p).expect("s2t");
        let rows: Vec<Vec<f64>> = (0..len).map(|j| c.row(j).to_vec()).collect();
        let (expect, _) = loop_s2t(&rows, &store, &p);
        for d in 0..4 {
            worst_s2t = worst_s2t.max((got[[0, d]] - expect[d]).abs());
        }
    }
    let mut worst_fuse = 0.0f64;
    for case in 0..100 {
        let k = case % 4;
        let mut store = ParamStore::new();
        let sp = SignalParams::init(&mut store, (3, 3, 2), 2, 1, 1, 1, k, &mut rng);
        let s2t = S2tParams::init(&mut store, "context.s2t", 4, &mut rng);
        randomize(&mut store, &mut rng);
        let window = random_mat(&mut rng, k + 1, 4, 2.0);
        let n_pad = if k == 0 { 0 } else { rng.gen_range(0..=k) };
        let pads: Vec<bool> = (0..=k).map(|t| t < n_pad).collect();
        let (cf, attn) = fuse_context(&window, &pads, &store, &sp, &s2t).expect("fuse");
        let pc = store.value(sp.turn_pos_embedding);
        let real: Vec<usize> = (n_pad..=k).collect();
        let rows: Vec<Vec<f64>> = real.iter().map(|&t| (0..4).map(|d| window[[t, d]] + pc[[t, d]]).collect()).collect();
        let (expect, weights) = loop_s2t(&rows, &store, &s2t);
        for d in 0..4 {
            worst_fuse = worst_fuse.max((cf[[0, d]] - expect[d]).abs());
            for (i, &t) in real.iter().enumerate() {
                worst_fuse = worst_fuse.max((attn[[d, t]] - weights[i][d]).abs());
            }
            for t in 0..n_pad {
                worst_fuse = worst_fuse.max(attn[[d, t]].abs());
            }
        }
    }
    report(
        7,
        "loop-oracle equivalence",
        worst_s2t <= 1e-10 && worst_fuse <= 1e-10,
        format!("100 s2t cases max |err| {worst_s2t:.1e}, 100 context-fusion cases max |err| {worst_fuse:.1e} (<= 1e-10)"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn invariants() -> Verdict {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let kt = 6;
    for case in 0..200 {
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 12, 3, 3, kt, &mut rng);
        randomize(&mut store, &mut rng);
        let len = rng.gen_range(1..=kt);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..12)).collect();
        let mut padded = tokens.clone();
        padded.resize(kt, PAD_ID);

        // directional masks: rows on the unmasked side ignore the other side
        let h = random_mat(&mut rng, kt, 3, 1.0);
        let j = rng.gen_range(0..len);
        let mut later = h.clone();
        let mut earlier = h.clone();
        for r in j + 1..len {
            later.row_mut(r).mapv_inplace(|x| x + 1.0);
        }
        for r in 0..j {
            earlier.row_mut(r).mapv_inplace(|x| x - 1.0);
        }
        let fw = t2t_directional_attention(&h, len, Direction::Forward, &store, &p);
        let fw2 = t2t_directional_attention(&later, len, Direction::Forward, &store, &p);
        let bw = t2t_directional_attention(&h, len, Direction::Backward, &store, &p);
        let bw2 = t2t_directional_attention(&earlier, len, Direction::Backward, &store, &p);
        let same = |a: &Mat, b: &Mat, rows: std::ops::Range<usize>| {
            rows.into_iter().all(|r| (&a.row(r) - &b.row(r)).iter().all(|d| d.abs() < 1e-12))
        };
        if !same(&fw, &fw2, 0..j + 1) || !same(&bw, &bw2, j..len) {
            failures.push(format!("case {case}: directional mask leak"));
        }
        let mut other = padded.clone();
        for t in other.iter_mut().take(len).skip(j + 1) {
            *t = 1 + (*t % 11);
        }
        let a = encode_utterance(&padded, &store, &p).expect("encode");
        let b = encode_utterance(&other, &store, &p).expect("encode");
        if !(0..=j).all(|r| (0..3).all(|c| (a.token_states[[r, c]] - b.token_states[[r, c]]).abs() < 1e-12)) {
            failures.push(format!("case {case}: forward states see later tokens"));
        }

        // padding neutrality
        let bare = encode_utterance(&tokens, &store, &p).expect("encode");
        if bare.sentence_vector != a.sentence_vector {
            failures.push(format!("case {case}: trailing pads move the sentence vector"));
        }

        // fusion gate range
        let mut g = Graph::new();
        let hn = g.constant(random_mat(&mut rng, 4, 3, 3.0));
        let hm = g.constant(random_mat(&mut rng, 4, 3, 3.0));
        let (_, gate) = fusion_gate(&mut g, &store, p.direction(Direction::Forward), hn, hm);
        if !g.value(gate).iter().all(|&x| x > 0.0 && x < 1.0) {
            failures.push(format!("case {case}: gate outside (0, 1)"));
        }

        // normalisation: constant inputs are reproduced, context weights sum to one
        let flat = Mat::from_elem((kt, 6), 0.75);
        let mask: Vec<bool> = (0..kt).map(|r| r < len).collect();
        let out = s2t_attention(&flat, &mask, &store, &p.s2t).expect("s2t");
        if out.iter().any(|x| (x - 0.75).abs() > 1e-12) {
            failures.push(format!("case {case}: s2t weights do not sum to one"));
        }
        let k = case % 4;
        let mut cstore = ParamStore::new();
        let sp = SignalParams::init(&mut cstore, (3, 3, 2), 2, 1, 1, 1, k, &mut rng);
        let s2t = S2tParams::init(&mut cstore, "context.s2t", 4, &mut rng);
        let n_pad = if k == 0 { 0 } else { rng.gen_range(0..=k) };
        let pads: Vec<bool> = (0..=k).map(|t| t < n_pad).collect();
        let (_, attn) = fuse_context(&random_mat(&mut rng, k + 1, 4, 1.0), &pads, &cstore, &sp, &s2t).expect("fuse");
        for d in 0..4 {
            let row = attn.row(d);
            if (row.sum() - 1.0).abs() > 1e-12 || row.iter().take(n_pad).any(|&w| w != 0.0) {
                failures.push(format!("case {case}: context attention not normalised"));
            }
        }
    }

    // BIO validity and JSONL round trip of generated corpora
    let dir = tempfile::tempdir().expect("tempdir");
    for seed in 0..20 {
        for profile in [Profile::CableLike, Profile::BookingLike] {
            let recs = generate_records(seed, 25, profile);
            if let Some(t) = recs.iter().flat_map(|r| &r.turns).find(|t| validate_bio(&t.slots).is_err()) {
                failures.push(format!("invalid BIO in generated turn `{}`", t.text));
            }
            let path = dir.path().join(format!("{seed}-{profile}.jsonl"));
            save_conversational_jsonl(&path, &recs).expect("write");
            let back = read_conversational_jsonl(&path).expect("read");
            let again = Dataset::from_records(&back, Split::Train, None).expect("dataset").to_records();
            if back != recs || again != recs {
                failures.push(format!("JSONL round trip differs for seed {seed} {profile}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    report(
        8,
        "structural invariants",
        pass,
        format!(
            "200 encoder/fusion cases, 40 corpora; {} violations{}; {:.1} s (< 120 s)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn overfit() -> Verdict {
    let recs = generate_records(11, 10, Profile::CableLike);
    let data = Dataset::from_records(&recs, Split::Train, None).expect("dataset");
    let hp = Hyperparams {
        max_epochs: 50,
        patience: 50,
        ..Hyperparams::default()
    };
    let result = train(&data, &data, ModelVariant::casa(), &hp, 1, None)
        .and_then(|out| Ok((evaluate(&out.model, &data, HistoryPolicy::Predicted)?, out.best_epoch)));
    match result {
        Ok((m, epoch)) => report(
            9,
            "overfit sanity",
            m.ic_accuracy == 100.0 && m.sl_token_f1 == 100.0,
            format!(
                "10 conversations, {} turns: train IC {:.2}, SL F1 {:.2} (both 100) at epoch {epoch} of <= 50",
                m.n_turns, m.ic_accuracy, m.sl_token_f1
            ),
        ),
        Err(e) => report(9, "overfit sanity", false, format!("training failed: {e}")),
    }
}

// ---------------------------------------------------------- criteria 1 and 2

fn benchmark(
    id: u8,
    name: &'static str,
    env: &str,
    threshold: f64,
    subsample_threshold: f64,
    n_intents: usize,
    size_check: Option<(Split, usize)>,
) -> Verdict {
    let Some(dir) = std::env::var_os(env).map(PathBuf::from) else {
        return report(id, name, false, format!("corpus not available: set {env} to a directory with train.txt and test.txt"));
    };
    let load = || -> casa_nlu::Result<(Dataset, Dataset)> {
        let train_set = load_flat_icsl(&dir.join("train.txt"), Split::Train, None)?;
        let test = load_flat_icsl(&dir.join("test.txt"), Split::Test, Some(train_set.vocabs.clone()))?;
        Ok((train_set, test))
    };
    let (full_train, test) = match load() {
        Ok(d) => d,
        Err(e) => return report(id, name, false, format!("cannot load {}: {e}", dir.display())),
    };
    let mut notes = Vec::new();
    // the intent vocabulary includes the dummy entry
    let found_intents = full_train.vocabs.intents.len() - 1;
    if found_intents != n_intents {
        notes.push(format!("{found_intents} intents, expected {n_intents}"));
    }
    if let Some((split, n)) = size_check {
        let got = match split {
            Split::Train => full_train.conversations.len(),
            _ => test.conversations.len(),
        };
        if got != n {
            notes.push(format!("{split:?} has {got} utterances, expected {n}"));
        }
    }

    let hp = Hyperparams::default();
    let (train_set, val) = full_train.clone().hold_out(0.1, 0);
    let start = Instant::now();
    let first = run_seeds(&train_set, &val, &test, ModelVariant::nc(), &Hyperparams { seeds: vec![hp.seeds[0]], ..hp.clone() }, HistoryPolicy::Predicted);
    let projected = start.elapsed() * hp.seeds.len() as u32;
    let (report_, limit, label) = if projected > Duration::from_secs(2 * 3600) {
        // too slow for the full protocol: fixed half of the training split
        let (half, _) = train_set.hold_out(0.5, 0);
        (run_seeds(&half, &val, &test, ModelVariant::nc(), &hp, HistoryPolicy::Predicted), subsample_threshold, "50% subsample")
    } else {
        let rest = Hyperparams { seeds: hp.seeds[1..].to_vec(), ..hp.clone() };
        let merged = first.and_then(|a| {
            let b = run_seeds(&train_set, &val, &test, ModelVariant::nc(), &rest, HistoryPolicy::Predicted)?;
            MetricsReport::new(a.per_seed.into_iter().chain(b.per_seed).collect())
        });
        (merged, threshold, "full train")
    };
    match report_ {
        Ok(r) => report(
            id,
            name,
            notes.is_empty() && r.mean.ic_accuracy >= limit,
            format!(
                "NC mean IC {:.2} over seeds {:?} on {label} (>= {limit}){}",
                r.mean.ic_accuracy,
                hp.seeds,
                if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
            ),
        ),
        Err(e) => report(id, name, false, format!("run failed: {e}")),
    }
}

// ---------------------------------------------------------- criteria 3 and 4

fn synthetic_splits(profile: Profile, n_train: usize, n_val: usize, n_test: usize) -> (Dataset, Dataset, Dataset) {
    let recs = generate_records(1, n_train + n_val + n_test, profile);
    let train_set = Dataset::from_records(&recs[..n_train], Split::Train, None).expect("train split");
    let v = Some(train_set.vocabs.clone());
    let val = Dataset::from_records(&recs[n_train..n_train + n_val], Split::Validation, v.clone()).expect("val split");
    let test = Dataset::from_records(&recs[n_train + n_val..], Split::Test, v).expect("test split");
    (train_set, val, test)
}

fn fu(r: &MetricsReport) -> f64 {
    r.mean.ic_followup.unwrap_or(f64::NAN)
}

fn contextual() -> Vec<Verdict> {
    let (train_set, val, test) = synthetic_splits(Profile::CableLike, 2000, 200, 500);
    let hp = Hyperparams::default();
    let run = |v: ModelVariant| run_seeds(&train_set, &val, &test, v, &hp, HistoryPolicy::Predicted);
    let (casa, nc, cgru) = match (run(ModelVariant::casa()), run(ModelVariant::nc()), run(ModelVariant::cgru())) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let err = [a.err(), b.err(), c.err()].into_iter().flatten().map(|e| e.to_string()).collect::<Vec<_>>();
            return vec![
                report(3, "context benefit", false, format!("training failed: {err:?}")),
                report(4, "CASA vs CGRU", false, format!("training failed: {err:?}")),
            ];
        }
    };
    let fu_gap = fu(&casa) - fu(&nc);
    let ic_gap = casa.mean.ic_accuracy - nc.mean.ic_accuracy;
    let c3 = report(
        3,
        "context benefit",
        fu_gap >= 15.0 && ic_gap >= 8.0,
        format!(
            "cable-like 2000/500, predicted history: CASA IC {:.2} FU {:.2}, NC IC {:.2} FU {:.2}; FU gap {fu_gap:.2} (>= 15), IC gap {ic_gap:.2} (>= 8)",
            casa.mean.ic_accuracy,
            fu(&casa),
            nc.mean.ic_accuracy,
            fu(&nc)
        ),
    );
    let wins = casa
        .per_seed
        .iter()
        .zip(&cgru.per_seed)
        .filter(|(a, b)| a.metrics.ic_followup > b.metrics.ic_followup)
        .count();
    let per_seed: Vec<String> = casa
        .per_seed
        .iter()
        .zip(&cgru.per_seed)
        .map(|(a, b)| {
            format!(
                "seed {}: {:.2} vs {:.2}",
                a.seed,
                a.metrics.ic_followup.unwrap_or(f64::NAN),
                b.metrics.ic_followup.unwrap_or(f64::NAN)
            )
        })
        .collect();
    let c4 = report(
        4,
        "CASA vs CGRU",
        casa.mean.ic_accuracy >= cgru.mean.ic_accuracy - 0.5 && wins >= 2,
        format!(
            "IC {:.2} vs {:.2} (CASA >= CGRU - 0.5); FU strictly higher in {wins}/3 seeds (>= 2) [{}]",
            casa.mean.ic_accuracy,
            cgru.mean.ic_accuracy,
            per_seed.join(", ")
        ),
    );
    vec![c3, c4]
}

// ---------------------------------------------------------------- criterion 5

fn ablation() -> Verdict {
    let (train_set, val, test) = synthetic_splits(Profile::BookingLike, 1000, 100, 300);
    let hp = Hyperparams::default();
    match run_ablation(&train_set, &val, &test, &[SignalFlags::NONE, SignalFlags::ALL], &hp, HistoryPolicy::Predicted) {
        Ok(rows) => {
            let (none, all) = (&rows[0].report.mean, &rows[1].report.mean);
            let gap = all.ic_accuracy - none.ic_accuracy;
            report(
                5,
                "ablation direction",
                gap >= 4.0,
                format!(
                    "booking-like 1000/300: all signals IC {:.2}, no signals IC {:.2}, gap {gap:.2} (>= 4)",
                    all.ic_accuracy, none.ic_accuracy
                ),
            )
        }
        Err(e) => report(5, "ablation direction", false, format!("run failed: {e}")),
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use casa_nlu::context_fusion::{summarize_attention, AttentionRecord};
use casa_nlu::data::{
    generate_records, load_conversational_jsonl, load_flat_icsl, write_conversational_jsonl, Dataset, Split,
    Vocabularies,
};
use casa_nlu::model::Model;
use casa_nlu::training::{
    default_ablation_grid, evaluate, evaluate_turns, run_ablation, train, MetricsReport, SeedMetrics,
};

use crate::config::{parse_signals, DataFormat, RunConfig};
use crate::{heatmap, Failure};

fn load(path: &Path, format: DataFormat, split: Split, vocabs: Option<Arc<Vocabularies>>) -> Result<Dataset, Failure> {
    let data = match format {
        DataFormat::Jsonl => load_conversational_jsonl(path, split, vocabs),
        DataFormat::Flat => load_flat_icsl(path, split, vocabs),
    };
    data.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Train split plus validation (given or held out) and an optional test split.
fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Option<Dataset>), Failure> {
    let format = cfg.format()?;
    let train_path = cfg.input_path("train")?;
    let val_path = cfg.optional_input_path("val")?;
    let test_path = cfg.optional_input_path("test")?;
    let val_fraction: f64 = cfg.parse_or("val_fraction", 0.1)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Failure::Config("val_fraction must be in [0, 1)".into()));
    }
    let train_set = load(&train_path, format, Split::Train, None)?;
    let vocabs = train_set.vocabs.clone();
    let (train_set, val) = match val_path {
        Some(p) => (train_set, load(&p, format, Split::Validation, Some(vocabs.clone()))?),
        None => train_set.hold_out(val_fraction, 0),
    };
    let test = test_path
        .map(|p| load(&p, format, Split::Test, Some(vocabs)))
        .transpose()?;
    if train_set.is_empty() {
        return Err(Failure::Data(format!("{}: no training conversations", train_path.display())));
    }
    if val.is_empty() {
        return Err(Failure::Data("validation split is empty".into()));
    }
    Ok((train_set, val, test))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn print_metrics_table(report: &MetricsReport) {
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    eprintln!("{:<8} {:>8} {:>8} {:>8} {:>8}", "seed", "IC", "SL F1", "IC Ft", "IC FU");
    for s in &report.per_seed {
        let m = &s.metrics;
        eprintln!(
            "{:<8} {:>8.2} {:>8.2} {:>8} {:>8}",
            s.seed,
            m.ic_accuracy,
            m.sl_token_f1,
            pct(m.ic_first_turn),
            pct(m.ic_followup)
        );
    }
    let m = &report.mean;
    eprintln!(
        "{:<8} {:>8.2} {:>8.2} {:>8} {:>8}",
        "mean",
        m.ic_accuracy,
        m.sl_token_f1,
        pct(m.ic_first_turn),
        pct(m.ic_followup)
    );
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let seed: u64 = cfg.parse_or("seed", 1)?;
    let n: usize = cfg.parse("n")?.ok_or_else(|| Failure::Config("missing required key `n`".into()))?;
    let profile = cfg.profile()?;
    let out = cfg.output_path("out")?;
    let records = if n == 0 { Vec::new() } else { generate_records(seed, n, profile) };
    let mut buf = Vec::new();
    write_conversational_jsonl(&mut buf, &records).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_bytes(&out, &buf)?;
    log::info!("wrote {} {profile} conversations to {}", records.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let hp = cfg.hyperparams()?;
    let variant = cfg.variant()?;
    let policy = cfg.history("history")?;
    let out_dir = cfg.output_dir("out_dir")?;
    let (train_set, val, test) = load_splits(cfg)?;
    let eval_set = test.as_ref().unwrap_or(&val);

    let mut runs = Vec::new();
    for &seed in &hp.seeds {
        let mut log_buf = Vec::new();
        let outcome = train(&train_set, &val, variant, &hp, seed, Some(&mut log_buf))
            .map_err(|e| Failure::Runtime(format!("seed {seed}: {e}")))?;
        let metrics = evaluate(&outcome.model, eval_set, policy).map_err(|e| Failure::Runtime(e.to_string()))?;
        log::info!(
            "seed {seed}: best epoch {}, IC {:.2}, SL F1 {:.2}",
            outcome.best_epoch,
            metrics.ic_accuracy,
            metrics.sl_token_f1
        );
        runs.push((seed, outcome.model, log_buf, metrics));
    }
    let report = MetricsReport::new(
        runs.iter()
            .map(|(seed, _, _, m)| SeedMetrics {
                seed: *seed,
                metrics: m.clone(),
            })
            .collect(),
    )
    .map_err(|e| Failure::Runtime(e.to_string()))?;

    // everything is written only after all seeds finished
    create_dir(&out_dir)?;
    for (seed, model, log_buf, _) in &runs {
        model
            .save(&out_dir.join(format!("seed-{seed}.ckpt.json")))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        write_bytes(&out_dir.join(format!("seed-{seed}.log.jsonl")), log_buf)?;
    }
    write_json(&out_dir.join("report.json"), &report)?;
    write_bytes(&out_dir.join("run.conf"), cfg.to_file_text().as_bytes())?;
    print_metrics_table(&report);
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let format = cfg.format()?;
    let policy = cfg.history("history")?;
    let data_path = cfg.input_path("data")?;
    let out = cfg.optional_output_path("out")?;
    let ckpts: Vec<PathBuf> = cfg.require("checkpoint")?.split(',').map(|p| PathBuf::from(p.trim())).collect();
    if let Some(missing) = ckpts.iter().find(|p| !p.is_file()) {
        return Err(Failure::Data(format!("checkpoint: no such file {}", missing.display())));
    }
    let mut per_seed = Vec::new();
    for path in &ckpts {
        let model = Model::load(path).map_err(|e| Failure::Data(e.to_string()))?;
        let data = load(&data_path, format, Split::Test, Some(model.vocabs.clone()))?;
        let metrics = evaluate(&model, &data, policy).map_err(|e| Failure::Data(e.to_string()))?;
        per_seed.push(SeedMetrics {
            seed: model.seed,
            metrics,
        });
    }
    let report = MetricsReport::new(per_seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    if let Some(out) = out {
        write_json(&out, &report)?;
    }
    print_metrics_table(&report);
    Ok(())
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let hp = cfg.hyperparams()?;
    let policy = cfg.history("history")?;
    let out_dir = cfg.output_dir("out_dir")?;
    let grid = match cfg.get("grid") {
        Some(g) => g.split(';').map(parse_signals).collect::<Result<Vec<_>, _>>()?,
        None => default_ablation_grid(),
    };
    let (train_set, val, test) = load_splits(cfg)?;
    let eval_set = test.as_ref().unwrap_or(&val);
    let rows = run_ablation(&train_set, &val, eval_set, &grid, &hp, policy)
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    create_dir(&out_dir)?;
    write_json(&out_dir.join("ablation.json"), &rows)?;
    let mut table = String::from("config          IC       SL F1    IC FU\n");
    for row in &rows {
        let m = &row.report.mean;
        table.push_str(&format!(
            "{:<15} {:>7.2}  {:>7.2}  {:>7}\n",
            row.flags.to_string(),
            m.ic_accuracy,
            m.sl_token_f1,
            m.ic_followup.map_or("-".into(), |v| format!("{v:.2}"))
        ));
    }
    write_bytes(&out_dir.join("ablation.txt"), table.as_bytes())?;
    std::io::stdout()
        .write_all(table.as_bytes())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

pub fn viz_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let format = cfg.format()?;
    let policy = cfg.history("history")?;
    let ckpt = cfg.input_path("checkpoint")?;
    let data_path = cfg.input_path("data")?;
    let conv_id = cfg.require("conv")?.to_string();
    let turn: usize = cfg.parse("turn")?.ok_or_else(|| Failure::Config("missing required key `turn`".into()))?;
    let out = cfg.output_path("out")?;
    let heatmap_path = cfg.optional_output_path("heatmap")?;

    let model = Model::load(&ckpt).map_err(|e| Failure::Data(e.to_string()))?;
    let mut data = load(&data_path, format, Split::Test, Some(model.vocabs.clone()))?;
    data.conversations.retain(|c| c.id == conv_id);
    let n_turns = match data.conversations.first() {
        Some(c) => c.turns.len(),
        None => return Err(Failure::Data(format!("no conversation with id `{conv_id}`"))),
    };
    if turn >= n_turns {
        return Err(Failure::Data(format!("conversation `{conv_id}` has {n_turns} turns, asked for turn {turn}")));
    }
    let results = evaluate_turns(&model, &data, policy).map_err(|e| Failure::Runtime(e.to_string()))?;
    let result = results
        .iter()
        .find(|r| r.scored.turn_index == turn)
        .ok_or_else(|| Failure::Runtime(format!("turn {turn} was not evaluated")))?;
    let attn = result.attention.as_ref().ok_or_else(|| {
        Failure::Config(format!(
            "the {} variant has no temporal attention to visualise",
            model.config.variant.kind
        ))
    })?;
    let summary = summarize_attention(attn, &model.signals.layout).map_err(|e| Failure::Runtime(e.to_string()))?;
    let record = AttentionRecord::new(&conv_id, turn, &summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_json(&out, &record)?;
    if let Some(path) = heatmap_path {
        let rows = [&record.signals.utt, &record.signals.intent, &record.signals.da];
        heatmap::render(&rows).save(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dialogem::corpus::{
    filter_dialogues, load_jsonl, make_instances, save_jsonl, split, synthesize_corpus, Dialogue,
    Instance,
};
use dialogem::em::{
    e_step, finetune as train_gold, hard_assign, run_em_from, Assignment, EmObserver, EmState,
    IterationLog, IterationRecord,
};
use dialogem::eval::{
    addressee_accuracy, evaluate_generation, generate_response, rouge_l, BleuStats, MetricsReport,
};
use dialogem::model::{load_checkpoint, save_checkpoint, GeneratorParams};
use dialogem::text::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::config::{require, RunConfig};
use crate::{DataError, UsageError};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = require(&cfg.paths.out, "output directory", "--out")?.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| DataError(format!("{}:{}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<Dialogue>> {
    if !SPLITS.contains(&name) {
        return Err(UsageError(format!("unknown split `{name}`; expected train, valid or test")).into());
    }
    let dir = require(&cfg.paths.data, "data directory", "--data")?;
    let dialogues = load_jsonl(dir.join(format!("{name}.jsonl")))?;
    Ok(filter_dialogues(dialogues, cfg.data.min_turns))
}

fn load_model(cfg: &RunConfig) -> Result<(GeneratorParams, Vocabulary)> {
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint", "--checkpoint")?;
    let params = load_checkpoint(ckpt)?;
    let vocab_path = match &cfg.paths.vocab {
        Some(p) => p.clone(),
        None => default_vocab_path(ckpt),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    check_vocab(&vocab, &params, &vocab_path)?;
    Ok((params, vocab))
}

/// `run/checkpoints/x.ckpt` pairs with `run/vocab.txt`.
fn default_vocab_path(ckpt: &Path) -> PathBuf {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let run = if dir.file_name().is_some_and(|n| n == "checkpoints") {
        dir.parent().unwrap_or(dir)
    } else {
        dir
    };
    run.join("vocab.txt")
}

fn check_vocab(vocab: &Vocabulary, params: &GeneratorParams, path: &Path) -> Result<()> {
    if vocab.len() != params.config.vocab_size {
        return Err(DataError(format!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            path.display(),
            vocab.len(),
            params.config.vocab_size
        ))
        .into());
    }
    Ok(())
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join("config.resolved"), &cfg.to_toml())
}

#[derive(Serialize)]
struct LabelRow<'a> {
    dialogue_id: &'a str,
    t: usize,
    addressee: usize,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let dialogues = filter_dialogues(synthesize_corpus(&cfg.synth_config())?, cfg.data.min_turns);

    let mut labels = Vec::new();
    let mut unlabeled = dialogues.clone();
    for d in &mut unlabeled {
        for (i, u) in d.utterances.iter_mut().enumerate() {
            if let Some(z) = u.addressee.take() {
                labels.push((d.id.clone(), i + 1, z));
            }
        }
    }
    save_jsonl(out.join("corpus.jsonl"), &unlabeled)?;
    let rows: Vec<LabelRow> = labels
        .iter()
        .map(|(id, t, z)| LabelRow {
            dialogue_id: id,
            t: *t,
            addressee: *z,
        })
        .collect();
    write_jsonl(&out.join("labels.jsonl"), &rows)?;

    let s = split(&dialogues, cfg.data.split, cfg.seed)?;
    for (name, part) in SPLITS.iter().zip([&s.train, &s.valid, &s.test]) {
        save_jsonl(out.join(format!("{name}.jsonl")), part)?;
    }
    echo_config(cfg, &out)?;
    eprintln!(
        "wrote {} dialogues ({} train, {} valid, {} test) to {}",
        dialogues.len(),
        s.train.len(),
        s.valid.len(),
        s.test.len(),
        out.display()
    );
    Ok(())
}

/// Persists every iteration as it completes so an interrupted run can resume.
struct RunWriter {
    dir: PathBuf,
    log: IterationLog,
}

impl RunWriter {
    fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("iter-{iteration:03}.ckpt"))
    }
}

impl EmObserver for RunWriter {
    fn on_iteration(
        &mut self,
        record: &IterationRecord,
        params: &GeneratorParams<f32>,
        is_best: bool,
        _assignments: &[Assignment],
    ) -> dialogem::Result<()> {
        save_checkpoint(self.checkpoint_path(record.iteration), params)?;
        if is_best {
            save_checkpoint(self.dir.join("checkpoints").join("best.ckpt"), params)?;
        }
        self.log.records.push(record.clone());
        let csv = self.dir.join("iterations.csv");
        fs::write(&csv, self.log.to_csv()).map_err(|e| dialogem::Error::Io {
            path: csv,
            source: e,
        })?;
        eprintln!(
            "iteration {} alpha {:.2} top acc {:.4} all acc {:.4} BLEU-4 {:.4}",
            record.iteration, record.alpha, record.sel_addr_acc, record.all_addr_acc, record.bleu[3]
        );
        Ok(())
    }
}

fn resume_state(cfg: &RunConfig, out: &Path, vocab: &Vocabulary) -> Result<Option<EmState>> {
    let csv = out.join("iterations.csv");
    if !csv.exists() {
        return Ok(None);
    }
    let previous = out.join("config.resolved");
    let old = RunConfig::resolve(Some(&previous), &[])
        .map_err(|e| DataError(format!("cannot resume: {e:#}")))?;
    if old.resume_key() != cfg.resume_key() {
        return Err(UsageError(format!(
            "{} was started with a different configuration; only the iteration count may change on resume",
            out.display()
        ))
        .into());
    }
    let log = IterationLog::from_csv(&fs::read_to_string(&csv)?)?;
    let Some(last) = log.records.last().map(|r| r.iteration) else {
        return Ok(None);
    };
    let ckpt = |name: String| -> Result<GeneratorParams> {
        let path = out.join("checkpoints").join(name);
        load_checkpoint(&path)
            .with_context(|| format!("refusing to resume from {}", path.display()))
    };
    let params = ckpt(format!("iter-{last:03}.ckpt"))?;
    let best = ckpt("best.ckpt".into())?;
    check_vocab(vocab, &params, &out.join("vocab.txt"))?;
    eprintln!("resuming {} after iteration {last}", out.display());
    Ok(Some(EmState {
        params,
        log,
        best: Some(best),
        valid_assignments: None,
    }))
}

pub fn train_em(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let train_d = load_split(cfg, "train")?;
    let valid_d = load_split(cfg, "valid")?;
    let (train, valid) = (make_instances(&train_d), make_instances(&valid_d));

    let vocab_path = out.join("vocab.txt");
    let vocab = if out.join("iterations.csv").exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let v = Vocabulary::build(&train_d, cfg.data.vocab_min_freq, cfg.data.vocab_max_size);
        v.save(&vocab_path)?;
        v
    };
    let state = match resume_state(cfg, &out, &vocab)? {
        Some(s) => s,
        None => EmState::fresh(&cfg.model_config(vocab.len()))?,
    };
    echo_config(cfg, &out)?;
    fs::create_dir_all(out.join("checkpoints"))?;

    let mut writer = RunWriter {
        dir: out.clone(),
        log: state.log.clone(),
    };
    let outcome = run_em_from(&train, &valid, &vocab, &cfg.em_config(), state, &mut writer)?;
    write_file(&out.join("iterations.csv"), &outcome.log.to_csv())?;

    let best = &outcome.log.records[outcome.best_iteration];
    let mut metrics = format!("best_iteration = {}\n", outcome.best_iteration);
    metrics += &format!("alpha = {:.6}\n", best.alpha);
    metrics += &format!("sel_addr_acc = {:.6}\n", best.sel_addr_acc);
    metrics += &MetricsReport {
        bleu: best.bleu,
        rouge_l: best.rouge_l,
        addressee_accuracy: Some(best.all_addr_acc),
        n_examples: valid.len(),
    }
    .to_key_value();
    write_file(&out.join("metrics.txt"), &metrics)?;
    eprintln!("best iteration {} (BLEU-4 {:.4})", outcome.best_iteration, best.bleu[3]);
    Ok(())
}

pub fn finetune(cfg: &RunConfig, no_addressee: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let train_d = load_split(cfg, "train")?;
    let train = make_instances(&train_d);

    let (mut params, vocab) = if cfg.paths.checkpoint.is_some() {
        load_model(cfg)?
    } else {
        let vocab = match &cfg.paths.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => Vocabulary::build(&train_d, cfg.data.vocab_min_freq, cfg.data.vocab_max_size),
        };
        (GeneratorParams::init(&cfg.model_config(vocab.len()))?, vocab)
    };
    vocab.save(out.join("vocab.txt"))?;
    echo_config(cfg, &out)?;

    let losses = train_gold(&mut params, &train, &vocab, &cfg.finetune_config(no_addressee))?;
    let mut log = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log += &format!("{},{l:.6}\n", i + 1);
    }
    write_file(&out.join("finetune.csv"), &log)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    save_checkpoint(out.join("checkpoints").join("finetuned.ckpt"), &params)?;
    eprintln!(
        "fine-tuned {} epochs on {} instances, final loss {:.4}",
        losses.len(),
        train.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    dialogue_id: String,
    t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

fn model_assignments(
    params: &GeneratorParams,
    instances: &[Instance],
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<Vec<Assignment>> {
    Ok(e_step(params, instances, vocab, cfg.em.max_context_len)?
        .iter()
        .map(hard_assign)
        .collect())
}

pub fn eval(cfg: &RunConfig, predictions: Option<&Path>, split_name: &str, no_addressee: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let instances = make_instances(&load_split(cfg, split_name)?);
    let gold: Vec<Option<usize>> = instances.iter().map(|i| i.gold_addressee).collect();

    let report = match predictions {
        Some(path) => eval_predictions(path, &instances, &gold)?,
        None => {
            let (params, vocab) = load_model(cfg)?;
            let mut report = evaluate_generation(&params, &instances, &vocab, &cfg.decode_config(no_addressee))?;
            let assignments = model_assignments(&params, &instances, &vocab, cfg)?;
            report.addressee_accuracy = Some(addressee_accuracy(&assignments, &gold, None)?);
            report
        }
    };
    echo_config(cfg, &out)?;
    write_file(&out.join("metrics.txt"), &report.to_key_value())?;
    print!("{}", report.to_key_value());
    Ok(())
}

fn eval_predictions(path: &Path, instances: &[Instance], gold: &[Option<usize>]) -> Result<MetricsReport> {
    let rows: Vec<PredictionRow> = read_jsonl_rows(path)?;
    let index: HashMap<(&str, usize), usize> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| ((inst.dialogue_id.as_str(), inst.t), i))
        .collect();

    let mut stats = BleuStats::default();
    let mut rouge = 0.0;
    let mut n_responses = 0usize;
    let mut assignments = Vec::new();
    let mut assigned_gold = Vec::new();
    for row in &rows {
        let &i = index.get(&(row.dialogue_id.as_str(), row.t)).ok_or_else(|| {
            DataError(format!("prediction for unknown instance {} t={}", row.dialogue_id, row.t))
        })?;
        if let Some(text) = &row.response {
            let candidate: Vec<&str> = text.split_whitespace().collect();
            let reference: Vec<&str> = instances[i].response.iter().map(String::as_str).collect();
            stats.add(&candidate, std::slice::from_ref(&reference));
            rouge += rouge_l(&candidate, &reference)?;
            n_responses += 1;
        }
        if let Some(z) = row.z {
            assignments.push(Assignment {
                index: assignments.len(),
                dialogue_id: row.dialogue_id.clone(),
                t: row.t,
                z,
                confidence: row.confidence.unwrap_or(1.0),
            });
            assigned_gold.push(gold[i]);
        }
    }
    if n_responses == 0 && assignments.is_empty() {
        return Err(DataError(format!("{} contains no responses or addressees", path.display())).into());
    }
    let (bleu, rouge_l) = if n_responses > 0 {
        (
            [stats.bleu(1), stats.bleu(2), stats.bleu(3), stats.bleu(4)],
            rouge / n_responses as f64,
        )
    } else {
        ([0.0; 4], 0.0)
    };
    let addressee = if assignments.is_empty() {
        None
    } else {
        Some(addressee_accuracy(&assignments, &assigned_gold, None)?)
    };
    Ok(MetricsReport {
        bleu,
        rouge_l,
        addressee_accuracy: addressee,
        n_examples: rows.len(),
    })
}

pub fn generate(cfg: &RunConfig, split_name: &str, no_addressee: bool) -> Result<()> {
    use rayon::prelude::*;

    let out = out_dir(cfg)?;
    let instances = make_instances(&load_split(cfg, split_name)?);
    let (params, vocab) = load_model(cfg)?;
    let decode = cfg.decode_config(no_addressee);
    let take = decode.limit.unwrap_or(instances.len()).min(instances.len());
    let rows: Vec<PredictionRow> = instances[..take]
        .par_iter()
        .map(|inst| -> dialogem::Result<PredictionRow> {
            let ids = generate_response(&params, inst, &vocab, &decode)?;
            Ok(PredictionRow {
                dialogue_id: inst.dialogue_id.clone(),
                t: inst.t,
                response: Some(vocab.decode(&ids).join(" ")),
                z: None,
                confidence: None,
            })
        })
        .collect::<dialogem::Result<_>>()?;
    echo_config(cfg, &out)?;
    write_jsonl(&out.join("predictions.jsonl"), &rows)?;
    eprintln!("wrote {} responses to {}", rows.len(), out.join("predictions.jsonl").display());
    Ok(())
}

pub fn parse(cfg: &RunConfig, input: &Path) -> Result<()> {
    let out = out_dir(cfg)?;
    let dialogues = load_jsonl(input)?;
    for d in dialogues.iter().filter(|d| d.len() < 2) {
        eprintln!("warning: dialogue {} has a single turn; no addressee to predict", d.id);
    }
    let instances = make_instances(&dialogues);
    if instances.is_empty() {
        return Err(DataError(format!("{} has no turn with an earlier turn to address", input.display())).into());
    }
    let (params, vocab) = load_model(cfg)?;
    let assignments = model_assignments(&params, &instances, &vocab, cfg)?;
    echo_config(cfg, &out)?;
    write_jsonl(&out.join("predictions.jsonl"), &assignments)?;

    let labeled: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].gold_addressee.is_some())
        .collect();
    if !labeled.is_empty() {
        let preds: Vec<Assignment> = labeled.iter().map(|&i| assignments[i].clone()).collect();
        let gold: Vec<Option<usize>> = labeled.iter().map(|&i| instances[i].gold_addressee).collect();
        let acc = addressee_accuracy(&preds, &gold, None)?;
        println!("addressee accuracy = {acc:.6} ({} labeled of {} turns)", labeled.len(), instances.len());
    }
    eprintln!("wrote {} predictions to {}", assignments.len(), out.join("predictions.jsonl").display());
    Ok(())
}

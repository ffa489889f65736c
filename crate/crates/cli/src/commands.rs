//! Subcommand implementations. All randomness flows from --seed; no command
//! mutates its inputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scrawl_core::augment::generate_pairs;
use scrawl_core::calibration::{
    calibration_report, collect_token_events, default_rejection_grid, fit_temperature,
    rejection_curve, Aggregate,
};
use scrawl_core::decoding::{ensemble_decode, greedy_decode, identity_translate};
use scrawl_core::metrics::{evaluate, flesch_kincaid, lix, normalized_ed, text_stats, MetricsReport};
use scrawl_core::model::{encoder_input, load_checkpoint, save_checkpoint, ModelParams};
use scrawl_core::ngram::NGramModel;
use scrawl_core::text::{
    inject_pair_noise, load_pairs, save_pairs, split_dataset, TextPair, TokenSeq, Vocab,
};
use scrawl_core::training::{self, LossKind};

use crate::config::{load_file_config, parse_loss};
use crate::{
    AugmentArgs, CalibReportArgs, CalibrateArgs, EvalArgs, LmTrainArgs, RejectCurveArgs, SplitArgs,
    TrainArgs, TranslateArgs,
};

/// One translate output line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredRecord {
    pub student: String,
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for line in lines {
        writeln!(w, "{}", line.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Vocab::from_json(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, vocab.to_json())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Deterministic vocabulary rule shared by train and lm-train: every
/// character on either side of the pair file.
pub fn vocab_from_pairs(pairs: &[TextPair]) -> Vocab {
    Vocab::build(
        pairs
            .iter()
            .flat_map(|p| [p.student.as_str(), p.teacher.as_str()]),
    )
}

pub fn load_preds(path: &Path) -> Result<Vec<PredRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let record: PredRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_preds(records: &[PredRecord], path: &Path) -> Result<()> {
    write_lines(
        path,
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes")),
    )
}

fn teacher_token_seqs(pairs: &[TextPair], vocab: &Vocab) -> Vec<TokenSeq> {
    pairs
        .iter()
        .map(|p| {
            let mut ids = vocab.encode(&p.teacher).0;
            ids.push(Vocab::EOS);
            TokenSeq(ids)
        })
        .collect()
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing ratios {text:?}"))?;
    if parts.len() != 3 {
        bail!("ratios must be three comma-separated numbers, got {text:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

pub fn split(args: SplitArgs) -> Result<()> {
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let ratios = parse_ratios(&args.ratios)?;
    let split = split_dataset(&pairs, ratios, args.seed).context("splitting")?;
    let train = match args.noise_rate {
        Some(rate) => inject_pair_noise(&split.train, rate, args.seed).context("injecting noise")?,
        None => split.train,
    };
    let prefix = args.out_prefix.display();
    save_pairs(&train, format!("{prefix}.train"))?;
    save_pairs(&split.validation, format!("{prefix}.val"))?;
    save_pairs(&split.test, format!("{prefix}.test"))?;
    println!(
        "split {} pairs into {} train / {} val / {} test{}",
        pairs.len(),
        train.len(),
        split.validation.len(),
        split.test.len(),
        args.noise_rate
            .map(|r| format!(" ({r} noise on train)"))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn augment(args: AugmentArgs) -> Result<()> {
    let file_cfg = load_file_config(args.config.as_deref())?;
    let augment_cfg = file_cfg.augment.resolve(args.seed)?;
    let texts = read_lines(&args.input).context("reading clean corpus")?;
    if texts.is_empty() {
        bail!("clean corpus {} is empty", args.input.display());
    }
    let pairs = generate_pairs(&texts, &augment_cfg);
    save_pairs(&pairs, &args.out).context("writing pairs")?;
    let mean_ned: f64 = pairs
        .iter()
        .map(|p| normalized_ed(&p.student, &p.teacher))
        .sum::<f64>()
        / pairs.len() as f64;
    println!(
        "augmented {} texts (mean student/teacher NED {mean_ned:.3})",
        pairs.len()
    );
    Ok(())
}

pub fn lm_train(args: LmTrainArgs) -> Result<()> {
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let vocab = match &args.vocab {
        Some(path) => load_vocab(path)?,
        None => vocab_from_pairs(&pairs),
    };
    let seqs = teacher_token_seqs(&pairs, &vocab);
    let model = NGramModel::fit(&seqs, args.order, args.smoothing, vocab.size())
        .context("fitting n-gram model")?;
    model.save(&args.out).context("writing model")?;
    if let Some(path) = &args.vocab_out {
        save_vocab(&vocab, path)?;
    }
    let mean_lp: f64 = seqs
        .iter()
        .map(|s| model.log_prob_seq(s).unwrap_or(f64::NEG_INFINITY) / s.len() as f64)
        .sum::<f64>()
        / seqs.len().max(1) as f64;
    println!(
        "fitted order-{} model on {} sequences (K = {}, mean per-token log-prob {mean_lp:.3})",
        args.order,
        seqs.len(),
        vocab.size()
    );
    Ok(())
}

fn too_long(pair: &TextPair, max_seq_len: usize) -> bool {
    pair.student.chars().count() + 2 > max_seq_len
        || pair.teacher.chars().count() + 1 > max_seq_len
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file_cfg = load_file_config(args.config.as_deref())?;
    let mut train_pairs = load_pairs(&args.train).context("loading training pairs")?;
    let mut val_pairs = load_pairs(&args.val).context("loading validation pairs")?;

    let vocab = match &args.vocab {
        Some(path) => load_vocab(path)?,
        None => vocab_from_pairs(&train_pairs),
    };

    let mut model_cfg = file_cfg.model.resolve(vocab.size());
    if let Some(v) = args.d_model {
        model_cfg.d_model = v;
    }
    if let Some(v) = args.n_heads {
        model_cfg.n_heads = v;
    }
    if let Some(v) = args.n_encoder_layers {
        model_cfg.n_encoder_layers = v;
    }
    if let Some(v) = args.n_decoder_layers {
        model_cfg.n_decoder_layers = v;
    }
    if let Some(v) = args.d_ffn {
        model_cfg.d_ffn = v;
    }
    if let Some(v) = args.max_seq_len {
        model_cfg.max_seq_len = v;
    }

    let mut train_cfg = file_cfg.train.resolve(args.seed)?;
    if let Some(name) = &args.loss {
        train_cfg.loss = parse_loss(name)?;
    }
    if let Some(v) = args.epsilon {
        train_cfg.label_smoothing = v;
    }
    if let Some(v) = args.alpha {
        train_cfg.alpha = v;
    }
    if let Some(v) = args.lr {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        train_cfg.weight_decay = v;
    }
    if let Some(v) = args.dropout {
        train_cfg.dropout = Some(v);
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        train_cfg.max_epochs = v;
    }
    if let Some(v) = args.patience {
        train_cfg.patience = v;
    }

    if args.drop_too_long {
        let before = train_pairs.len() + val_pairs.len();
        train_pairs.retain(|p| !too_long(p, model_cfg.max_seq_len));
        val_pairs.retain(|p| !too_long(p, model_cfg.max_seq_len));
        let dropped = before - train_pairs.len() - val_pairs.len();
        if dropped > 0 {
            println!("dropped {dropped} over-length pairs");
        }
    }

    let lm = match &args.lm {
        Some(path) => Some(NGramModel::load(path).context("loading n-gram model")?),
        None => None,
    };
    if train_cfg.loss == LossKind::Robust && lm.is_none() {
        bail!("--loss robust requires --lm <model.lm>");
    }
    let init = match &args.init_ckpt {
        Some(path) => Some(load_checkpoint(path).context("loading init checkpoint")?),
        None => None,
    };

    let (params, history) = training::train(
        &train_pairs,
        &val_pairs,
        &vocab,
        &model_cfg,
        &train_cfg,
        lm.as_ref(),
        init.as_ref(),
    )
    .context("training")?;

    save_checkpoint(&params, &args.out).context("writing checkpoint")?;
    let vocab_out = args
        .vocab_out
        .clone()
        .unwrap_or_else(|| sidecar_path(&args.out, "vocab.json"));
    save_vocab(&vocab, &vocab_out)?;
    if let Some(path) = &args.history {
        std::fs::write(path, history.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let best = &history.epochs[history.best_epoch];
    println!(
        "trained {} epochs; best epoch {} with val median NED {:.4} (mean {:.4}); checkpoint {} ({} parameters)",
        history.epochs.len(),
        best.epoch,
        best.val_median_ned,
        best.val_mean_ned,
        args.out.display(),
        params.n_parameters()
    );
    Ok(())
}

pub fn sidecar_path(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.as_os_str().to_os_string();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn load_students(args: &TranslateArgs) -> Result<Vec<String>> {
    if args.raw_text {
        read_lines(&args.input)
    } else {
        Ok(load_pairs(&args.input)
            .context("loading pairs")?
            .into_iter()
            .map(|p| p.student)
            .collect())
    }
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    let students = load_students(&args)?;
    let records: Vec<PredRecord> = if args.identity {
        students
            .into_iter()
            .map(|student| {
                let prediction = identity_translate(&student);
                PredRecord {
                    student,
                    prediction,
                    confidence: None,
                }
            })
            .collect()
    } else {
        let vocab_path = args
            .vocab
            .as_ref()
            .context("--vocab is required unless --identity")?;
        let vocab = load_vocab(vocab_path)?;
        let models: Vec<ModelParams> = if !args.ensemble.is_empty() {
            args.ensemble
                .iter()
                .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<_>>()?
        } else {
            let ckpt = args
                .ckpt
                .as_ref()
                .context("one of --ckpt, --ensemble, --identity is required")?;
            vec![load_checkpoint(ckpt).context("loading checkpoint")?]
        };
        for m in &models {
            if m.config.vocab_size != vocab.size() {
                bail!(
                    "checkpoint vocab size {} does not match vocabulary {} ",
                    m.config.vocab_size,
                    vocab.size()
                );
            }
        }
        let max_len = args.max_len.unwrap_or(models[0].config.max_seq_len);
        let refs: Vec<&ModelParams> = models.iter().collect();
        students
            .into_iter()
            .map(|student| -> Result<PredRecord> {
                let x = encoder_input(&vocab, &student);
                let out = if refs.len() > 1 {
                    ensemble_decode(&refs, &vocab, &x, args.temperature, max_len)?
                } else {
                    greedy_decode(refs[0], &vocab, &x, args.temperature, max_len)?
                };
                Ok(PredRecord {
                    student,
                    prediction: out.text,
                    confidence: Some(out.confidence),
                })
            })
            .collect::<Result<_>>()?
    };
    save_preds(&records, &args.out).context("writing predictions")?;
    println!("translated {} texts -> {}", records.len(), args.out.display());
    Ok(())
}

fn render_report(report: &MetricsReport) -> String {
    format!(
        "n = {}\n\
         mean ED   {:.3} +- {:.3}   median ED   {:.3}\n\
         mean NED  {:.4} +- {:.4}  median NED  {:.4}\n\
         FK MAE    {:.3} +- {:.3}\n\
         LIX MAE   {:.3} +- {:.3}",
        report.n,
        report.mean_ed,
        report.sem_ed,
        report.median_ed,
        report.mean_ned,
        report.sem_ned,
        report.median_ned,
        report.fk_mae,
        report.fk_mae_sem,
        report.lix_mae,
        report.lix_mae_sem,
    )
}

fn align_preds(pairs: &[TextPair], preds: &[PredRecord]) -> Result<()> {
    if pairs.len() != preds.len() {
        bail!(
            "pair file has {} entries but prediction file has {}",
            pairs.len(),
            preds.len()
        );
    }
    if let Some(i) = pairs
        .iter()
        .zip(preds)
        .position(|(pair, pred)| pair.student != pred.student)
    {
        bail!("prediction file does not align with pair file at line {}", i + 1);
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let preds = load_preds(&args.pred)?;
    align_preds(&pairs, &preds)?;
    let texts: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
    let (report, per_pair) = evaluate(&pairs, &texts).context("evaluating")?;

    println!("{}", render_report(&report));
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.per_pair {
        let mut rows = vec!["ed,ned,fk_pred,fk_true,lix_pred,lix_true,confidence".to_string()];
        for (row, pred) in per_pair.iter().zip(&preds) {
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                row.ed,
                row.ned,
                row.fk_pred,
                row.fk_true,
                row.lix_pred,
                row.lix_true,
                pred.confidence.map(|c| c.to_string()).unwrap_or_default()
            ));
        }
        write_lines(path, rows)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct TemperatureSidecar {
    pub temperature: f64,
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    let params = load_checkpoint(&args.ckpt).context("loading checkpoint")?;
    let vocab = load_vocab(&args.vocab)?;
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let scaler = fit_temperature(&params, &vocab, &pairs).context("fitting temperature")?;

    let before = collect_token_events(&params, &vocab, &pairs, 1.0)?;
    let after = collect_token_events(&params, &vocab, &pairs, scaler.get())?;
    let ece_before = calibration_report(&before, 10)?.ece;
    let ece_after = calibration_report(&after, 10)?.ece;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| sidecar_path(&args.ckpt, "temp.json"));
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&TemperatureSidecar {
            temperature: scaler.get(),
        })?,
    )
    .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "fitted T = {:.4} (val ECE {ece_before:.4} -> {ece_after:.4}) -> {}",
        scaler.get(),
        out.display()
    );
    Ok(())
}

pub fn calib_report(args: CalibReportArgs) -> Result<()> {
    let params = load_checkpoint(&args.ckpt).context("loading checkpoint")?;
    let vocab = load_vocab(&args.vocab)?;
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let temperature = match &args.temp_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TemperatureSidecar>(&text)?.temperature
        }
        None => args.temperature,
    };
    let events = collect_token_events(&params, &vocab, &pairs, temperature)?;
    let report = calibration_report(&events, args.bins)?;

    let mut rows = vec!["bin_lo,bin_hi,count,mean_confidence,accuracy".to_string()];
    for bin in &report.bins {
        rows.push(format!(
            "{},{},{},{},{}",
            bin.lo, bin.hi, bin.count, bin.mean_confidence, bin.accuracy
        ));
    }
    write_lines(&args.out, rows)?;
    println!(
        "T = {temperature:.4}: ECE {:.4}, MCE {:.4} over {} events -> {}",
        report.ece,
        report.mce,
        report.n_events,
        args.out.display()
    );
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("parsing grid entry {p:?}"))
        })
        .collect()
}

pub fn reject_curve(args: RejectCurveArgs) -> Result<()> {
    let pairs = load_pairs(&args.pairs).context("loading pairs")?;
    let preds = load_preds(&args.pred)?;
    align_preds(&pairs, &preds)?;

    let samples: Vec<(f64, f64)> = pairs
        .iter()
        .zip(&preds)
        .map(|(pair, pred)| -> Result<(f64, f64)> {
            let confidence = pred
                .confidence
                .context("prediction file carries no confidences (identity output?)")?;
            let value = match args.metric.as_str() {
                "ned" => normalized_ed(&pred.prediction, &pair.teacher),
                "fk-mae" => (flesch_kincaid(text_stats(&pred.prediction))
                    - flesch_kincaid(text_stats(&pair.teacher)))
                .abs(),
                "lix-mae" => {
                    (lix(text_stats(&pred.prediction)) - lix(text_stats(&pair.teacher))).abs()
                }
                other => bail!("unknown metric {other:?} (expected ned, fk-mae, lix-mae)"),
            };
            Ok((confidence, value))
        })
        .collect::<Result<_>>()?;

    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => default_rejection_grid(),
    };
    let aggregate = if args.metric == "ned" {
        Aggregate::Mean
    } else {
        Aggregate::Mae
    };
    let curve = rejection_curve(&samples, aggregate, &grid).context("building curve")?;

    let mut rows = vec!["rejection,retained,value".to_string()];
    for p in &curve.points {
        rows.push(format!("{},{},{}", p.rejection, p.retained, p.value));
    }
    write_lines(&args.out, rows)?;
    println!(
        "{} curve over {} samples -> {}",
        args.metric,
        samples.len(),
        args.out.display()
    );
    Ok(())
}

//! End-to-end experiment: augment -> split -> lm-train -> train (smoothed
//! cross-entropy on clean and noisy data, robust on noisy data) ->
//! translate -> eval -> calibrate -> reject-curve, with one consolidated
//! summary comparing every variant against the Identity baseline.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use scrawl_core::calibration::{
    calibration_report, collect_token_events, default_rejection_grid, fit_temperature,
    rejection_curve, Aggregate,
};
use scrawl_core::decoding::greedy_decode;
use scrawl_core::metrics::{evaluate, MetricsReport};
use scrawl_core::model::{encoder_input, save_checkpoint, ModelParams};
use scrawl_core::ngram::NGramModel;
use scrawl_core::text::{inject_pair_noise, save_pairs, split_dataset, TokenSeq, Vocab};
use scrawl_core::training::{train, LossKind, TrainConfig};

use crate::commands::{
    read_lines, save_preds, save_vocab, sidecar_path, write_lines, PredRecord, TemperatureSidecar,
};
use crate::config::{load_file_config, FileConfig};
use crate::PipelineArgs;

#[derive(Serialize)]
struct CalibrationSummary {
    temperature: f64,
    val_ece_before: f64,
    val_ece_after: f64,
    val_mce_before: f64,
    val_mce_after: f64,
}

#[derive(Serialize)]
struct VariantSummary {
    name: String,
    metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rejection_ned: Option<Vec<(f64, f64)>>,
}

#[derive(Serialize)]
struct PipelineSummary {
    seed: u64,
    n_texts: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    noise_rate: f64,
    lm_order: usize,
    variants: Vec<VariantSummary>,
}

pub fn run(args: PipelineArgs) -> Result<()> {
    let cfg = load_file_config(Some(&args.config))?;
    let out_dir = args
        .out_dir
        .clone()
        .or(cfg.paths.outputs.clone())
        .context("an output directory is required (--out-dir or [paths].outputs)")?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let summary = experiment_pipeline(&cfg, &out_dir)?;
    println!(
        "pipeline complete: {} variants -> {}",
        summary.variants.len(),
        out_dir.join("summary.json").display()
    );
    Ok(())
}

struct TrainedVariant {
    name: &'static str,
    params: ModelParams,
}

fn experiment_pipeline(cfg: &FileConfig, out_dir: &Path) -> Result<PipelineSummary> {
    let seed = cfg.seed.context("config must set a seed")?;
    let corpus_path = cfg
        .paths
        .corpus
        .as_ref()
        .context("config must name a clean-text corpus in [paths].corpus")?;
    let noise_rate = cfg.pipeline.noise_rate.unwrap_or(0.25);
    let ratios = cfg.pipeline.ratios.unwrap_or((0.8, 0.1, 0.1));
    let lm_order = cfg.lm.order();

    // augment
    let texts = read_lines(corpus_path).context("stage augment: reading corpus")?;
    anyhow::ensure!(!texts.is_empty(), "stage augment: corpus is empty");
    let augment_cfg = cfg.augment.resolve(seed).context("stage augment")?;
    let pairs = scrawl_core::augment::generate_pairs(&texts, &augment_cfg);
    save_pairs(&pairs, out_dir.join("pairs.jsonl")).context("stage augment: writing pairs")?;

    // split
    let split = split_dataset(&pairs, ratios, seed).context("stage split")?;
    save_pairs(&split.train, out_dir.join("corpus.train")).context("stage split")?;
    save_pairs(&split.validation, out_dir.join("corpus.val")).context("stage split")?;
    save_pairs(&split.test, out_dir.join("corpus.test")).context("stage split")?;

    // noise on train only
    let noisy_train =
        inject_pair_noise(&split.train, noise_rate, seed).context("stage noise")?;
    save_pairs(&noisy_train, out_dir.join("corpus.train.noisy")).context("stage noise")?;

    // vocab (teacher multiset is permutation-invariant, so clean and noisy
    // train share it)
    let vocab = crate::commands::vocab_from_pairs(&split.train);
    save_vocab(&vocab, &out_dir.join("vocab.json")).context("stage vocab")?;

    // lm-train on the noisy teachers, exactly what robust training sees
    let teacher_seqs: Vec<TokenSeq> = noisy_train
        .iter()
        .map(|p| {
            let mut ids = vocab.encode(&p.teacher).0;
            ids.push(Vocab::EOS);
            TokenSeq(ids)
        })
        .collect();
    let lm = NGramModel::fit(&teacher_seqs, lm_order, cfg.lm.smoothing(), vocab.size())
        .context("stage lm-train")?;
    lm.save(out_dir.join("model.lm")).context("stage lm-train")?;

    let model_cfg = cfg.model.resolve(vocab.size());
    let base_train = cfg.train.resolve(seed).context("stage train")?;

    // train: smoothed CE on clean data
    let ce_cfg = TrainConfig {
        loss: LossKind::SmoothedCe,
        ..base_train.clone()
    };
    let (ce_params, ce_history) = train(
        &split.train,
        &split.validation,
        &vocab,
        &model_cfg,
        &ce_cfg,
        None,
        None,
    )
    .context("stage train-smoothed-ce")?;
    save_checkpoint(&ce_params, out_dir.join("smoothed_ce.ckpt"))
        .context("stage train-smoothed-ce")?;
    std::fs::write(out_dir.join("smoothed_ce.history.csv"), ce_history.to_csv())
        .context("stage train-smoothed-ce")?;

    // train: smoothed CE on noisy data
    let (ce_noisy_params, ce_noisy_history) = train(
        &noisy_train,
        &split.validation,
        &vocab,
        &model_cfg,
        &ce_cfg,
        None,
        None,
    )
    .context("stage train-smoothed-ce-noisy")?;
    save_checkpoint(&ce_noisy_params, out_dir.join("smoothed_ce_noisy.ckpt"))
        .context("stage train-smoothed-ce-noisy")?;
    std::fs::write(
        out_dir.join("smoothed_ce_noisy.history.csv"),
        ce_noisy_history.to_csv(),
    )
    .context("stage train-smoothed-ce-noisy")?;

    // train: robust on noisy data, warm-started from the noisy CE model
    let robust_cfg = TrainConfig {
        loss: LossKind::Robust,
        learning_rate: base_train.learning_rate * 0.5,
        ..base_train.clone()
    };
    let (robust_params, robust_history) = train(
        &noisy_train,
        &split.validation,
        &vocab,
        &model_cfg,
        &robust_cfg,
        Some(&lm),
        Some(&ce_noisy_params),
    )
    .context("stage train-robust-noisy")?;
    save_checkpoint(&robust_params, out_dir.join("robust_noisy.ckpt"))
        .context("stage train-robust-noisy")?;
    std::fs::write(
        out_dir.join("robust_noisy.history.csv"),
        robust_history.to_csv(),
    )
    .context("stage train-robust-noisy")?;

    let max_decode_len = cfg
        .pipeline
        .max_decode_len
        .unwrap_or(model_cfg.max_seq_len)
        .min(model_cfg.max_seq_len);

    // identity baseline
    let mut variants = Vec::new();
    let identity_preds: Vec<PredRecord> = split
        .test
        .iter()
        .map(|p| PredRecord {
            student: p.student.clone(),
            prediction: scrawl_core::decoding::identity_translate(&p.student),
            confidence: None,
        })
        .collect();
    save_preds(&identity_preds, &out_dir.join("preds_identity.jsonl"))
        .context("stage translate")?;
    let texts_only: Vec<String> = identity_preds.iter().map(|p| p.prediction.clone()).collect();
    let (identity_report, _) = evaluate(&split.test, &texts_only).context("stage eval")?;
    std::fs::write(
        out_dir.join("report_identity.json"),
        serde_json::to_string_pretty(&identity_report)?,
    )
    .context("stage eval")?;
    variants.push(VariantSummary {
        name: "identity".into(),
        metrics: identity_report,
        calibration: None,
        rejection_ned: None,
    });

    let trained = [
        TrainedVariant {
            name: "smoothed_ce",
            params: ce_params,
        },
        TrainedVariant {
            name: "smoothed_ce_noisy",
            params: ce_noisy_params,
        },
        TrainedVariant {
            name: "robust_noisy",
            params: robust_params,
        },
    ];

    for variant in &trained {
        let name = variant.name;
        // translate
        let preds: Vec<PredRecord> = split
            .test
            .iter()
            .map(|pair| -> Result<PredRecord> {
                let x = encoder_input(&vocab, &pair.student);
                let out = greedy_decode(&variant.params, &vocab, &x, 1.0, max_decode_len)?;
                Ok(PredRecord {
                    student: pair.student.clone(),
                    prediction: out.text,
                    confidence: Some(out.confidence),
                })
            })
            .collect::<Result<_>>()
            .with_context(|| format!("stage translate ({name})"))?;
        save_preds(&preds, &out_dir.join(format!("preds_{name}.jsonl")))
            .with_context(|| format!("stage translate ({name})"))?;

        // eval
        let pred_texts: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
        let (report, per_pair) = evaluate(&split.test, &pred_texts)
            .with_context(|| format!("stage eval ({name})"))?;
        std::fs::write(
            out_dir.join(format!("report_{name}.json")),
            serde_json::to_string_pretty(&report)?,
        )
        .with_context(|| format!("stage eval ({name})"))?;

        // calibrate on validation data
        let scaler = fit_temperature(&variant.params, &vocab, &split.validation)
            .with_context(|| format!("stage calibrate ({name})"))?;
        let before = collect_token_events(&variant.params, &vocab, &split.validation, 1.0)
            .with_context(|| format!("stage calibrate ({name})"))?;
        let after =
            collect_token_events(&variant.params, &vocab, &split.validation, scaler.get())
                .with_context(|| format!("stage calibrate ({name})"))?;
        let report_before = calibration_report(&before, 10)?;
        let report_after = calibration_report(&after, 10)?;
        let ckpt_path = out_dir.join(format!("{name}.ckpt"));
        std::fs::write(
            sidecar_path(&ckpt_path, "temp.json"),
            serde_json::to_string_pretty(&TemperatureSidecar {
                temperature: scaler.get(),
            })?,
        )
        .with_context(|| format!("stage calibrate ({name})"))?;

        // reject-curve on test NED
        let samples: Vec<(f64, f64)> = preds
            .iter()
            .zip(&per_pair)
            .map(|(pred, row)| (pred.confidence.unwrap_or(f64::NEG_INFINITY), row.ned))
            .collect();
        let curve = rejection_curve(&samples, Aggregate::Mean, &default_rejection_grid())
            .with_context(|| format!("stage reject-curve ({name})"))?;
        let mut rows = vec!["rejection,retained,value".to_string()];
        for p in &curve.points {
            rows.push(format!("{},{},{}", p.rejection, p.retained, p.value));
        }
        write_lines(&out_dir.join(format!("curve_{name}.csv")), rows)
            .with_context(|| format!("stage reject-curve ({name})"))?;

        variants.push(VariantSummary {
            name: name.to_string(),
            metrics: report,
            calibration: Some(CalibrationSummary {
                temperature: scaler.get(),
                val_ece_before: report_before.ece,
                val_ece_after: report_after.ece,
                val_mce_before: report_before.mce,
                val_mce_after: report_after.mce,
            }),
            rejection_ned: Some(
                curve
                    .points
                    .iter()
                    .map(|p| (p.rejection, p.value))
                    .collect(),
            ),
        });
    }

    let summary = PipelineSummary {
        seed,
        n_texts: texts.len(),
        n_train: split.train.len(),
        n_val: split.validation.len(),
        n_test: split.test.len(),
        noise_rate,
        lm_order,
        variants,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )
    .context("stage summary")?;
    Ok(summary)
}

use std::fs;
use std::io::Write;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ard_core::evaluation::{build_similarity, evaluate, EvalConfig};
use ard_core::naming::{default_cache_dir, ConceptNamer, ProviderConfig, ResponseCache};
use ard_core::report::{annotation_summary, parse_annotation_log, ModelMeta, PipelineReport};
use ard_core::retrieval::{score_store, select_representatives};
use ard_core::sae::{load_checkpoint, save_checkpoint, train, SaeModel, TrainConfig};
use ard_core::scoring::{rank_features, score_features, MonosemanticityRow, RankingConfig};
use ard_core::steering::{export_steered_store, read_judged_labels, sensitivity, SteeringSpec};
use ard_core::store::{concept_embedding_id, label_embedding_id, ActivationStore};
use log::{info, warn};
use serde_json::json;

use crate::files::{read_json, write_json, RefsFile, ScoresFile, SCORES_SCHEMA};
use crate::server::{self, ServeConfig};
use crate::*;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Rank(a) => rank_cmd(a),
        Command::Name(a) => name_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Steer(a) => steer_cmd(a),
        Command::Sensitivity(a) => sensitivity_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::AnnotateSummary(a) => annotate_summary_cmd(a),
    }
}

fn open_store(path: &std::path::Path) -> Result<ActivationStore> {
    ActivationStore::open(path).with_context(|| format!("opening store {}", path.display()))
}

fn load_model(path: &std::path::Path) -> Result<SaeModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let model = SaeModel::init(store.d_x(), a.expansion, a.topk, a.seed)?;
    let config = TrainConfig {
        steps: a.steps,
        batch_tokens: a.batch,
        learning_rate: a.lr,
        adam_beta1: a.beta1,
        adam_beta2: a.beta2,
        adam_epsilon: a.adam_eps,
        seed: a.seed,
        shuffle: !a.no_shuffle,
    };
    info!(
        "training d_x={} d_z={} K={} for {} steps",
        model.d_x(),
        model.d_z(),
        model.topk(),
        config.steps
    );
    let outcome = train(model, &store, &config)?;
    save_checkpoint(&outcome.model, &a.out)?;
    if let Some(path) = &a.loss_csv {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(f, "step,mean_loss")?;
        for (step, loss) in outcome.loss_curve.iter().enumerate() {
            writeln!(f, "{step},{loss}")?;
        }
    }
    if let (Some(first), Some(last)) = (outcome.loss_curve.first(), outcome.loss_curve.last()) {
        info!("loss {first:.6} -> {last:.6}");
    }
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let model = load_model(&a.model)?;
    let ids: Vec<String> = store.clip_ids().map(String::from).collect();
    let sets = select_representatives(score_store(&model, &store)?, a.p, model.d_z(), &ids)?;
    let active = sets.iter().filter(|s| s.active_clips > 0).count();
    info!("{active} of {} features fired on {} clips", sets.len(), ids.len());
    write_json(
        &a.out,
        &ScoresFile {
            schema: SCORES_SCHEMA,
            p: a.p,
            d_z: model.d_z(),
            features: sets,
        },
    )
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let config = RankingConfig {
        top_c: a.top_c,
        epsilon: a.epsilon,
    };
    config.validate()?;
    let store = open_store(&a.store)?;
    let scores: ScoresFile = read_json(&a.scores)?;
    if scores.schema != SCORES_SCHEMA {
        bail!("unsupported scores schema {}", scores.schema);
    }
    let results = score_features(&scores.features, &store, config.epsilon)?;
    let ranked = rank_features(results, &config);
    info!("ranked {} features", ranked.len());
    let rows: Vec<MonosemanticityRow> = ranked.iter().map(MonosemanticityRow::from).collect();
    write_json(&a.out, &rows)
}

fn name_cmd(a: NameArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let model = load_model(&a.model)?;
    let scores: ScoresFile = read_json(&a.scores)?;
    let ranking: Vec<MonosemanticityRow> = read_json(&a.ranking)?;
    if !(a.timeout.is_finite() && a.timeout > 0.0) {
        bail!("--timeout must be a positive number of seconds");
    }
    let config = ProviderConfig {
        kind: a.provider,
        caption_prompt: a.caption_prompt,
        summary_prompt: a.summary_prompt,
        timeout: Duration::from_secs_f64(a.timeout),
        max_retries: a.max_retries,
        max_in_flight: a.max_in_flight,
        ..Default::default()
    };
    let cache = if a.no_cache {
        None
    } else {
        let dir = a.cache_dir.unwrap_or_else(default_cache_dir);
        Some(ResponseCache::new(&dir).with_context(|| format!("opening cache {}", dir.display()))?)
    };
    let namer = ConceptNamer::new(config.build_provider()?, &config, cache);
    let top: Vec<(usize, f64)> = ranking.iter().map(|r| (r.feature, r.m)).collect();
    let concepts = namer.name_concepts(&top, &scores.features, &store)?;
    let failed = concepts.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        warn!("{failed} of {} concepts could not be named", concepts.len());
    }
    info!("{} provider calls", namer.provider_calls());
    let report = PipelineReport::new(
        env!("CARGO_PKG_VERSION"),
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        ModelMeta::new(&model, &store.manifest().layer_tag),
        concepts,
    );
    report.validate(Some(store.manifest()))?;
    write_json(&a.out, &report)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let config = EvalConfig { gamma: a.gamma };
    config.validate()?;
    let store = open_store(&a.store)?;
    let report: PipelineReport = read_json(&a.report)?;
    let refs: RefsFile = read_json(&a.refs)?;
    let mut preds = Vec::new();
    for c in &report.concepts {
        if c.name.is_empty() {
            warn!("feature {} has no name, not evaluated", c.feature);
            continue;
        }
        preds.push(store.load_embedding(&concept_embedding_id(c.feature))?);
    }
    let mut labels = Vec::with_capacity(refs.labels.len());
    for l in &refs.labels {
        let mut emb = store.load_embedding(&label_embedding_id(&l.id))?;
        emb.id = l.id.clone();
        labels.push(emb);
    }
    if preds.is_empty() || labels.is_empty() {
        bail!("need at least one named concept and one reference label");
    }
    let matrix = build_similarity(&preds, &labels)?;
    let m_scores: Vec<f64> = match &a.ranking {
        Some(path) => read_json::<Vec<MonosemanticityRow>>(path)?.iter().map(|r| r.m).collect(),
        None => report.concepts.iter().map(|c| c.m_score).collect(),
    };
    let result = evaluate(&matrix, m_scores, &config)?;
    println!(
        "MS {:.4}  P {:.4}  R {:.4}  F1 {:.4}  mAP {:.4}",
        result.ms, result.precision, result.recall, result.f1, result.map
    );
    write_json(&a.out, &result)
}

fn steer_cmd(a: SteerArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let model = load_model(&a.model)?;
    let spec = SteeringSpec {
        feature: a.feature,
        value: a.value,
    };
    let out = export_steered_store(&model, &store, &spec, &a.out)?;
    info!("wrote {} steered clips to {}", out.manifest().clips.len(), a.out.display());
    Ok(())
}

fn sensitivity_cmd(a: SensitivityArgs) -> Result<()> {
    let file = fs::File::open(&a.labels).with_context(|| format!("opening {}", a.labels.display()))?;
    let rows: Vec<_> = read_judged_labels(file)
        .with_context(|| format!("parsing {}", a.labels.display()))?
        .into_iter()
        .map(|r| r.with_concepts(&a.source, &a.target))
        .collect();
    let value = sensitivity(&rows)?;
    let source_rows = rows.iter().filter(|r| r.baseline_label == a.source).count();
    let out = json!({
        "source": a.source,
        "target": a.target,
        "rows": rows.len(),
        "source_rows": source_rows,
        "sensitivity": value,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let config = ServeConfig {
        report: a.report,
        store: a.store,
        annotations: a.annotations,
        host: a.host,
        port: a.port,
        ui_dir: a.ui_dir,
        sample: a.sample,
        seed: a.seed,
    };
    tokio::runtime::Runtime::new()?.block_on(server::serve(config))
}

fn annotate_summary_cmd(a: AnnotateSummaryArgs) -> Result<()> {
    let report: PipelineReport = read_json(&a.report)?;
    let text = fs::read_to_string(&a.annotations)
        .with_context(|| format!("reading {}", a.annotations.display()))?;
    let records = parse_annotation_log(&text)
        .with_context(|| format!("parsing {}", a.annotations.display()))?;
    let summary = annotation_summary(&records, &report)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(path) = &a.out {
        write_json(path, &summary)?;
    }
    Ok(())
}

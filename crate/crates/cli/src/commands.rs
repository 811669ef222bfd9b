use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use s2t_saliency::analysis::{
    frequency_profile, intermediate_token_report, kurtosis_report, load_alignments, positional_stats,
    time_alignment_test, WordAlignment,
};
use s2t_saliency::audio::{featurize as featurize_wav, write_wav};
use s2t_saliency::corpus::{toy_corpus, ToyCorpusConfig};
use s2t_saliency::metrics::{deletion_curve, random_saliency, size_curve, EvalCurve, EvalItem, TaskMetric};
use s2t_saliency::saliency::{explain as explain_utterance, SaliencyBundle};
use s2t_saliency::segmentation::multiscale_segment;

use crate::manifest::{Entry, Manifest, Task};
use crate::oracle::OracleSpec;
use crate::render::render_map;
use crate::{
    AnalyzeArgs, CliError, CurveKind, EvaluateArgs, ExplainArgs, FeaturizeArgs, RenderArgs, ReportKind,
    SaliencySource, SegmentArgs, ToyCorpusArgs,
};

pub const BUNDLE_EXT: &str = "bundle";

pub fn bundle_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{BUNDLE_EXT}"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    write_text(path, &text)
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
    let to_io = |e: csv::Error| CliError::io(format!("cannot write {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(&r).map_err(to_io)?;
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs `f` on every entry, logging and collecting failures.
fn for_each_entry<F>(manifest: &Manifest, mut f: F) -> Result<(), CliError>
where
    F: FnMut(&Entry) -> Result<(), CliError>,
{
    let mut failed = Vec::new();
    for e in &manifest.entries {
        if let Err(err) = f(e) {
            log::error!("{}: {err}", e.id);
            failed.push(e.id.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed,
            total: manifest.entries.len(),
        })
    }
}

pub fn featurize(a: &FeaturizeArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_files()?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("featurize.config.json"),
        &json!({ "manifest": a.manifest, "cmvn": true }),
    )?;
    for_each_entry(&manifest, |e| {
        let x = featurize_wav(manifest.wav_path(e))?;
        x.save(a.out.join(format!("{}.spec", e.id)))?;
        Ok(())
    })
}

pub fn segment(a: &SegmentArgs) -> Result<(), CliError> {
    let resolved = a.config.flat()?.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_files()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &resolved.echo_json())?;
    for_each_entry(&manifest, |e| {
        let cfg = resolved.for_task(e.target_task);
        let x = featurize_wav(manifest.wav_path(e))?;
        for (i, seg) in multiscale_segment(&x, &cfg.segmentation)?.iter().enumerate() {
            seg.save(a.out.join(format!("{}.scale{i}.seg", e.id)))?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct UtteranceLog {
    id: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<usize>,
}

pub fn explain(a: &ExplainArgs) -> Result<(), CliError> {
    let resolved = a.config.flat()?.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_files()?;
    let spec = OracleSpec::resolve(a.oracle.as_deref())?;
    let oracle = spec.build();
    create_dir(&a.out)?;
    let echo = resolved.echo_json();
    write_text(&a.out.join("config.json"), &echo)?;
    let config_hash = format!("{:x}", Sha256::digest(echo.as_bytes()));

    let start = Instant::now();
    let mut log = Vec::new();
    let mut failed = Vec::new();
    for e in &manifest.entries {
        let t0 = Instant::now();
        let result = (|| -> Result<usize, CliError> {
            let x = featurize_wav(manifest.wav_path(e))?;
            let bundle = explain_utterance(&oracle, &x, None, &resolved.for_task(e.target_task))?;
            bundle.save(bundle_path(&a.out, &e.id))?;
            Ok(bundle.tokens.len())
        })();
        let seconds = t0.elapsed().as_secs_f64();
        match result {
            Ok(n) => {
                log::info!("{}: {n} tokens in {seconds:.2} s", e.id);
                log.push(UtteranceLog {
                    id: e.id.clone(),
                    ok: true,
                    error: None,
                    seconds,
                    tokens: Some(n),
                });
            }
            Err(err) => {
                log::error!("{}: {err}", e.id);
                failed.push(e.id.clone());
                log.push(UtteranceLog {
                    id: e.id.clone(),
                    ok: false,
                    error: Some(err.to_string()),
                    seconds,
                    tokens: None,
                });
            }
        }
    }
    write_json(
        &a.out.join("run.json"),
        &json!({
            "method": resolved.method(),
            "seed": resolved.seed(),
            "oracle": spec.to_string(),
            "config_sha256": config_hash,
            "total_seconds": start.elapsed().as_secs_f64(),
            "utterances": log,
        }),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed,
            total: manifest.entries.len(),
        })
    }
}

/// Bundles for every manifest entry; any missing one is an error naming all
/// the missing ids.
pub fn load_bundles(manifest: &Manifest, dir: &Path) -> Result<Vec<SaliencyBundle>, CliError> {
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| !bundle_path(dir, &e.id).is_file())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "no bundle in {} for: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    manifest
        .entries
        .iter()
        .map(|e| SaliencyBundle::load(bundle_path(dir, &e.id)).map_err(CliError::from))
        .collect()
}

fn task_metric(manifest: &Manifest) -> Result<TaskMetric, CliError> {
    let first = manifest.entries.first().map(|e| e.target_task).unwrap_or_default();
    if manifest.entries.iter().any(|e| e.target_task != first) {
        return Err(CliError::Config("deletion needs a manifest with a single target task".into()));
    }
    Ok(match first {
        Task::Asr => TaskMetric::Wer,
        Task::St => TaskMetric::Bleu,
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Config("empty manifest".into()));
    }
    let bundles = load_bundles(&manifest, &a.bundles)?;
    let maps: Vec<Array2<f64>> = match a.saliency {
        SaliencySource::Bundle => bundles.iter().map(|b| b.sentence.clone()).collect(),
        SaliencySource::Random => bundles
            .iter()
            .enumerate()
            .map(|(i, b)| random_saliency(b.shape(), a.seed.wrapping_add(i as u64)))
            .collect(),
    };
    let suffix = match a.saliency {
        SaliencySource::Bundle => "",
        SaliencySource::Random => "-random",
    };
    create_dir(&a.out)?;
    let (name, curve, oracle) = match a.metric {
        CurveKind::Size => (format!("size{suffix}"), size_curve(&maps)?, None),
        CurveKind::Deletion => {
            let metric = task_metric(&manifest)?;
            let spec = OracleSpec::resolve(a.oracle.as_deref())?;
            let items: Vec<EvalItem> = bundles
                .into_iter()
                .zip(maps)
                .zip(&manifest.entries)
                .map(|((b, saliency), e)| EvalItem {
                    input: b.input,
                    reference: e.reference_words(),
                    saliency,
                })
                .collect();
            let curve = deletion_curve(&spec.build(), &items, metric)?;
            (format!("deletion{suffix}"), curve, Some(spec.to_string()))
        }
    };
    write_json(
        &a.out.join(format!("{name}.config.json")),
        &json!({
            "manifest": a.manifest,
            "bundles": a.bundles,
            "metric": format!("{:?}", a.metric).to_lowercase(),
            "saliency": format!("{:?}", a.saliency).to_lowercase(),
            "seed": a.seed,
            "oracle": oracle,
        }),
    )?;
    write_curve(&a.out, &name, &curve)
}

fn write_curve(dir: &Path, name: &str, curve: &EvalCurve) -> Result<(), CliError> {
    write_text(&dir.join(format!("{name}.csv")), &curve.to_csv())?;
    write_text(&dir.join(format!("{name}.json")), &curve.to_json())?;
    log::info!("{name}: AUC {:.4}", curve.auc);
    Ok(())
}

fn alignments(manifest: &Manifest) -> Result<Vec<Vec<WordAlignment>>, CliError> {
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.alignment_path.is_none())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "this report needs word alignments; none given for: {}",
            missing.join(", ")
        )));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let p = manifest.alignment_path(e).expect("checked above");
            load_alignments(&p).map_err(|err| CliError::Config(format!("{}: {err}", p.display())))
        })
        .collect()
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    let word = match (a.report, &a.word) {
        (ReportKind::Frequency, None) => return Err(CliError::Config("the frequency report needs --word".into())),
        (_, w) => w.clone(),
    };
    let aligned = match a.report {
        ReportKind::Time | ReportKind::Frequency => Some(alignments(&manifest)?),
        _ => None,
    };
    let bundles = load_bundles(&manifest, &a.bundles)?;
    create_dir(&a.out)?;
    let name = match a.report {
        ReportKind::Time => "time".to_string(),
        ReportKind::Frequency => format!("frequency-{}", word.as_deref().unwrap_or_default()),
        ReportKind::Kurtosis => "kurtosis".into(),
        ReportKind::Positions => "positions".into(),
        ReportKind::Intermediate => "intermediate".into(),
    };
    write_json(
        &a.out.join(format!("{name}.config.json")),
        &json!({
            "manifest": a.manifest,
            "bundles": a.bundles,
            "report": name,
            "word": word,
            "exclude": a.exclude,
            "min_count": a.min_count,
        }),
    )?;
    let csv_path = a.out.join(format!("{name}.csv"));
    let json_path = a.out.join(format!("{name}.json"));

    match a.report {
        ReportKind::Time => {
            let r = time_alignment_test(&bundles, aligned.as_deref().expect("loaded"))?;
            write_csv(
                &csv_path,
                &["mean_in", "mean_out", "t", "p", "n_words", "skipped"],
                vec![vec![
                    r.mean_in.to_string(),
                    r.mean_out.to_string(),
                    r.t.to_string(),
                    r.p.to_string(),
                    r.n_words.to_string(),
                    r.skipped.to_string(),
                ]],
            )?;
            write_json(&json_path, &r)
        }
        ReportKind::Frequency => {
            let word = word.expect("checked above");
            let profile = frequency_profile(&bundles, aligned.as_deref().expect("loaded"), &word)?;
            let rows = profile.iter().enumerate().map(|(c, v)| vec![c.to_string(), v.to_string()]).collect();
            write_csv(&csv_path, &["channel", "saliency"], rows)?;
            write_json(&json_path, &json!({ "word": word, "profile": profile }))
        }
        ReportKind::Kurtosis => {
            let report = kurtosis_report(&bundles);
            let rows = report
                .iter()
                .map(|r| vec![r.token.clone(), r.count.to_string(), r.mean_kurtosis.to_string()])
                .collect();
            write_csv(&csv_path, &["token", "count", "mean_kurtosis"], rows)?;
            write_json(&json_path, &report)
        }
        ReportKind::Positions => {
            let exclude: Vec<&str> = a.exclude.iter().map(String::as_str).collect();
            let stats = positional_stats(&bundles, &exclude);
            let r = stats.report();
            let row = |group: &str, n: usize, mean: Option<f64>, test: Option<(f64, f64)>| {
                vec![
                    group.to_string(),
                    n.to_string(),
                    opt(mean),
                    opt(test.map(|t| t.0)),
                    opt(test.map(|t| t.1)),
                ]
            };
            let tp = |t: &Option<s2t_saliency::analysis::TTest>| t.map(|t| (t.t, t.p));
            let rows = vec![
                row("<s>", stats.start.len(), r.mean_start, tp(&r.start_vs_intermediate)),
                row("IT", stats.intermediate.len(), r.mean_intermediate, None),
                row("LT", stats.latest.len(), r.mean_latest, tp(&r.latest_vs_intermediate)),
            ];
            write_csv(&csv_path, &["group", "n", "mean", "t_vs_it", "p_vs_it"], rows)?;
            write_json(&json_path, &r)
        }
        ReportKind::Intermediate => {
            let report = intermediate_token_report(&bundles, a.min_count);
            let rows = report
                .iter()
                .map(|r| {
                    let top: Vec<String> = r.top.iter().map(|(t, n)| format!("{t}:{n}")).collect();
                    vec![r.token.clone(), r.occurrences.to_string(), r.it_max_pct.to_string(), top.join(" ")]
                })
                .collect();
            write_csv(&csv_path, &["token", "occurrences", "it_max_pct", "top"], rows)?;
            write_json(&json_path, &report)
        }
    }
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let bundle = SaliencyBundle::load(&a.bundle)?;
    let map = match a.token {
        Some(p) => {
            &bundle
                .token(p)
                .ok_or_else(|| {
                    let have: Vec<String> = bundle.maps.iter().map(|m| m.position.to_string()).collect();
                    CliError::Config(format!("no map for position {p}; explained: {}", have.join(", ")))
                })?
                .sx
        }
        None => &bundle.sentence,
    };
    let background = a.overlay.then(|| bundle.input.frames());
    let img = render_map(map, background, a.scale);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.save_with_format(&a.out, image::ImageFormat::Png)?;
    Ok(())
}

pub fn make_toy_corpus(a: &ToyCorpusArgs) -> Result<(), CliError> {
    let cfg = ToyCorpusConfig {
        n_utterances: a.n,
        seed: a.seed,
        ..Default::default()
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("toy.config.json"), &cfg)?;
    let mut entries = Vec::new();
    for u in toy_corpus(&cfg)? {
        let wav = format!("{}.wav", u.id);
        let align = format!("{}.align.json", u.id);
        write_wav(a.out.join(&wav), &u.waveform)?;
        write_json(&a.out.join(&align), &u.alignment)?;
        entries.push(Entry {
            id: u.id,
            wav_path: wav.into(),
            reference: u.reference.join(" "),
            alignment_path: Some(align.into()),
            target_task: Task::Asr,
        });
    }
    let path = a.out.join("manifest.json");
    Manifest::new(entries, &a.out)?
        .save(&path)
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

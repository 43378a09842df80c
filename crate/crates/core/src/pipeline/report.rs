use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::artifacts::{ensure_parent, label_slug, read_json, read_jsonl, write_json, Workspace};
use super::stages::{read_scores, CostSummary, RecordsHeader, ScoreSummary, Timing};
use super::{PipelineError, Provenance, RunConfig};
use crate::afp::EnsembleLabel;
use crate::eval::{analyze_study, Accuracy, CriterionOutcome, DiversityReport, PreferenceRecord, StudyResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub label: String,
    pub tau: f64,
    pub pairs: usize,
    pub different: usize,
    pub fraction_different: f64,
}

/// Everything `results.json` holds. Contains no timing, so two runs with
/// the same config serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub study_ensemble: EnsembleLabel,
    pub members: [String; 2],
    pub study: StudyResult,
    /// The same selectors scored against random-proxy listeners.
    pub negative_control: Option<StudyResult>,
    pub diversity: Vec<DiversitySummary>,
    /// Ensemble slug → criterion label → stage counters.
    pub costs: BTreeMap<String, BTreeMap<String, CostSummary>>,
}

#[derive(Deserialize)]
struct EnsemblesFile {
    ensembles: Vec<EnsembleEntry>,
}

#[derive(Deserialize)]
struct EnsembleEntry {
    label: EnsembleLabel,
    members: [String; 2],
}

#[derive(Deserialize)]
struct DiversityFile {
    reports: Vec<DiversityReport>,
}

fn study_for(
    ws: &Workspace,
    config: &RunConfig,
    control: bool,
    choices: &[(String, BTreeMap<String, usize>)],
) -> Result<StudyResult, PipelineError> {
    let (_, records): (RecordsHeader, Vec<PreferenceRecord>) =
        read_jsonl("records", &ws.records(&config.study_ensemble, control))?;
    Ok(analyze_study(&records, choices, config.ci_method)?)
}

/// Builds results and the report from persisted artifacts only.
pub fn report_stage(config: &RunConfig, ws: &Workspace) -> Result<RunResults, PipelineError> {
    let label = &config.study_ensemble;
    let ensembles: EnsemblesFile = read_json("ensembles", &ws.ensembles())?;
    let members = ensembles
        .ensembles
        .iter()
        .find(|e| &e.label == label)
        .map(|e| e.members.clone())
        .ok_or_else(|| PipelineError::Artifact {
            path: ws.ensembles().display().to_string(),
            reason: format!("study ensemble {label} not listed"),
        })?;

    let rows = read_scores(ws, label)?;
    let choices: Vec<(String, BTreeMap<String, usize>)> = config
        .criteria
        .iter()
        .map(|c| {
            let name = c.label();
            let map = rows
                .iter()
                .filter(|r| r.criterion == *c)
                .map(|r| (r.utterance_id.clone(), r.chosen_index))
                .collect();
            (name, map)
        })
        .collect();

    let study = study_for(ws, config, false, &choices)?;
    let negative_control = if config.negative_control {
        Some(study_for(ws, config, true, &choices)?)
    } else {
        None
    };

    let diversity: DiversityFile = read_json("diversity", &ws.diversity())?;
    let diversity = diversity
        .reports
        .iter()
        .map(|r| DiversitySummary {
            label: r.label.clone(),
            tau: r.tau,
            pairs: r.pairs.len(),
            different: r.pairs.iter().filter(|p| p.different).count(),
            fraction_different: r.fraction_different,
        })
        .collect();
    let summary: ScoreSummary = read_json("score summary", &ws.score_summary())?;

    let results = RunResults {
        provenance: Provenance::of(config),
        study_ensemble: label.clone(),
        members,
        study,
        negative_control,
        diversity,
        costs: summary.ensembles,
    };
    write_json(&ws.results_json(), &results)?;
    write_csv(ws, &results)?;
    let timing: Option<Timing> = read_json("timing", &ws.timing()).ok();
    let report = render_report(&results, timing.as_ref());
    fs::write(ws.report(), report).map_err(|e| PipelineError::io(&ws.report(), e))?;
    Ok(results)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    panel: &'a str,
    selector: String,
    rate: Option<f64>,
    matched: u64,
    considered: u64,
    excluded: u64,
    ci_low: f64,
    ci_high: f64,
    p_vs_chance: Option<f64>,
    p_vs_baseline: Option<f64>,
    p_vs_baseline_holm: Option<f64>,
    gap_closure: Option<f64>,
}

fn plain_row<'a>(panel: &'a str, selector: String, a: &Accuracy, ci: (f64, f64)) -> CsvRow<'a> {
    CsvRow {
        panel,
        selector,
        rate: a.rate,
        matched: a.matched,
        considered: a.considered,
        excluded: a.excluded,
        ci_low: ci.0,
        ci_high: ci.1,
        p_vs_chance: None,
        p_vs_baseline: None,
        p_vs_baseline_holm: None,
        gap_closure: None,
    }
}

fn study_rows<'a>(panel: &'a str, members: &[String; 2], s: &StudyResult) -> Vec<CsvRow<'a>> {
    let ci = |a: &Accuracy| crate::eval::proportion_ci_95(a.matched, a.considered, s.ci_method);
    let mut rows = vec![
        plain_row(panel, members[0].clone(), &s.members[0], ci(&s.members[0])),
        plain_row(panel, members[1].clone(), &s.members[1], ci(&s.members[1])),
    ];
    for c in &s.criteria {
        rows.push(CsvRow {
            p_vs_chance: Some(c.p_vs_chance),
            p_vs_baseline: Some(c.p_vs_baseline),
            p_vs_baseline_holm: Some(c.p_vs_baseline_holm),
            gap_closure: c.gap_closure,
            ..plain_row(panel, c.label.clone(), &c.accuracy, c.ci_95)
        });
    }
    rows.push(plain_row(panel, "oracle".into(), &s.oracle, s.oracle_ci_95));
    rows
}

fn write_csv(ws: &Workspace, r: &RunResults) -> Result<(), PipelineError> {
    let path = ws.results_csv();
    ensure_parent(&path)?;
    let csv_err = |e: csv::Error| PipelineError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut rows = study_rows("proxy", &r.members, &r.study);
    if let Some(control) = &r.negative_control {
        rows.extend(study_rows("random", &r.members, control));
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::io(&path, e))
}

fn pct(rate: Option<f64>) -> String {
    rate.map_or("n/a".into(), |r| format!("{:.1}%", 100.0 * r))
}

fn ci_pct(ci: (f64, f64)) -> String {
    format!("[{:.1}%, {:.1}%]", 100.0 * ci.0, 100.0 * ci.1)
}

fn accuracy_table(out: &mut String, members: &[String; 2], s: &StudyResult) {
    let ci = |a: &Accuracy| crate::eval::proportion_ci_95(a.matched, a.considered, s.ci_method);
    out.push_str("| selector | accuracy | 95% CI | matched / considered | p vs chance | p vs baseline (Holm) | gap closure |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (i, name) in members.iter().enumerate() {
        let a = &s.members[i];
        let mark = if i == s.baseline_member { " (baseline)" } else { "" };
        let _ = writeln!(
            out,
            "| {name}{mark} | {} | {} | {} / {} | | | |",
            pct(a.rate),
            ci_pct(ci(a)),
            a.matched,
            a.considered
        );
    }
    for c in &s.criteria {
        criterion_line(out, c);
    }
    let _ = writeln!(
        out,
        "| ORACLE | {} | {} | {} / {} | | | |",
        pct(s.oracle.rate),
        ci_pct(s.oracle_ci_95),
        s.oracle.matched,
        s.oracle.considered
    );
}

fn criterion_line(out: &mut String, c: &CriterionOutcome) {
    let _ = writeln!(
        out,
        "| {} | {} | {} | {} / {} | {:.4} | {:.4} ({:.4}) | {} |",
        c.label,
        pct(c.accuracy.rate),
        ci_pct(c.ci_95),
        c.accuracy.matched,
        c.accuracy.considered,
        c.p_vs_chance,
        c.p_vs_baseline,
        c.p_vs_baseline_holm,
        c.gap_closure.map_or("n/a".into(), |g| format!("{:.1}%", 100.0 * g))
    );
}

fn render_report(r: &RunResults, timing: Option<&Timing>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Rendition selection study\n");
    let _ = writeln!(
        out,
        "Config digest `{}`, format version {}. Study ensemble {} ({} vs {}).\n",
        r.provenance.config_digest, r.provenance.format_version, r.study_ensemble, r.members[0], r.members[1]
    );
    let s = &r.study;
    let undecided = if s.total_records > 0 {
        100.0 * s.undecided_records as f64 / s.total_records as f64
    } else {
        0.0
    };
    let _ = writeln!(
        out,
        "{} simulated responses, {} undecided ({undecided:.1}%). Accuracy is per response; \
         the ORACLE excludes {} utterance(s) with tied or undecided-majority votes.\n",
        s.total_records,
        s.undecided_records,
        s.oracle_excluded_utterances.len()
    );
    out.push_str("## Selection accuracy\n\n");
    accuracy_table(&mut out, &r.members, s);

    if let Some(c) = &r.negative_control {
        out.push_str("\n## Negative control (random listeners)\n\n");
        accuracy_table(&mut out, &r.members, c);
    }

    out.push_str("\n## Ensemble diversity\n\n| ensemble | tau | different / pairs | fraction |\n|---|---|---|---|\n");
    for d in &r.diversity {
        let _ = writeln!(
            out,
            "| {} | {} | {} / {} | {:.1}% |",
            d.label,
            d.tau,
            d.different,
            d.pairs,
            100.0 * d.fraction_different
        );
    }

    out.push_str("\n## Scoring cost\n\n| ensemble | criterion | pairs | AFP forwards | synth | mel | pitch | wall clock (s) |\n|---|---|---|---|---|---|---|---|\n");
    for (slug, per) in &r.costs {
        for (label, cost) in per {
            let secs = timing
                .and_then(|t| t.seconds.get(&format!("score.{slug}.{label}")))
                .map_or("n/a".into(), |s| format!("{s:.3}"));
            let c = &cost.counters;
            let _ = writeln!(
                out,
                "| {slug} | {label} | {} | {} | {} | {} | {} | {secs} |",
                cost.pairs, c.afp_forwards, c.synth_calls, c.mel_calls, c.pitch_calls
            );
        }
    }
    if let Some(t) = timing {
        let slug = label_slug(&r.study_ensemble);
        let get = |k: &str| t.seconds.get(&format!("score.{slug}.{k}/highest")).copied();
        if let Some(afp) = get("afp-f0").filter(|v| *v > 0.0) {
            out.push_str("\nWall-clock ratio to AFP-F0 on the study ensemble:");
            for k in ["gv", "wav-f0"] {
                if let Some(v) = get(k) {
                    let _ = write!(out, " {k} {:.1}x;", v / afp);
                }
            }
            out.push('\n');
        }
    }
    out
}

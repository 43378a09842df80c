use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{read_json, read_jsonl, write_json, write_jsonl, Workspace};
use super::report::{report_stage, RunResults};
use super::{read_features, write_features, FeatureHeader, PipelineError, Provenance, RunConfig, Seeds};
use crate::afp::{
    build_ensemble, load_checkpoint, save_checkpoint, train, AfpCheckpoint, AfpInput, AfpModel, Architecture, Ensemble,
    EnsembleLabel, LossLogEntry, ModelDims, TrainingMeta,
};
use crate::corpus::{gen_corpus, load_corpus, save_corpus, split_file, Corpus, ProsodyTargets, Split, Utterance};
use crate::criteria::{select, CriterionSpec, RenderSettings, Rendition, SelectionResult, StageCounters};
use crate::digest::derive_seed;
use crate::dsp::{read_wav, render_contours, synthesize, write_wav};
use crate::eval::{diversity_report, simulate_preferences, DiversityReport, ExpressivityProxy, PanelConfig, ProxyPair};

/// One trained predictor: an architecture and a seed slot (a or b).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Member {
    pub architecture: Architecture,
    pub slot: usize,
}

impl Member {
    pub fn name(&self) -> String {
        format!("{}-{}", self.architecture.short_name(), if self.slot == 0 { "a" } else { "b" })
    }

    pub fn seed(&self, seeds: &Seeds) -> u64 {
        if self.slot == 0 {
            seeds.train_a
        } else {
            seeds.train_b
        }
    }
}

/// Wall-clock seconds per stage; kept apart from results.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

impl Timing {
    pub fn record(&mut self, key: impl Into<String>, since: Instant) {
        self.seconds.insert(key.into(), since.elapsed().as_secs_f64());
    }

    /// Merges into the workspace's timing file.
    pub fn save(&self, ws: &Workspace) -> Result<(), PipelineError> {
        let path = ws.timing();
        let mut all: Timing = if path.exists() {
            read_json("timing", &path).unwrap_or_default()
        } else {
            Timing::default()
        };
        all.seconds.extend(self.seconds.iter().map(|(k, v)| (k.clone(), *v)));
        write_json(&path, &all)
    }
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, PipelineError> + Sync,
) -> Result<Vec<R>, PipelineError> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>, _>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Members of each configured ensemble. The heterogeneous ensemble draws
/// one checkpoint per architecture with a seeded RNG.
pub fn member_plan(config: &RunConfig) -> Vec<(EnsembleLabel, [Member; 2])> {
    let rnn = |slot| Member {
        architecture: Architecture::Recurrent,
        slot,
    };
    let conv = |slot| Member {
        architecture: Architecture::Convolutional,
        slot,
    };
    config
        .ensembles
        .iter()
        .map(|label| {
            let members = match label {
                EnsembleLabel::Rnn2 => [rnn(0), rnn(1)],
                EnsembleLabel::Conv2 => [conv(0), conv(1)],
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.noise, "rnn-conv"));
                    [rnn(rng.gen_range(0..2)), conv(rng.gen_range(0..2))]
                }
            };
            (label.clone(), members)
        })
        .collect()
}

fn needed_members(config: &RunConfig) -> Vec<Member> {
    let set: BTreeSet<Member> = member_plan(config).into_iter().flat_map(|(_, m)| m).collect();
    set.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest<T> {
    #[serde(flatten)]
    provenance: Provenance,
    #[serde(flatten)]
    body: T,
}

fn manifest<T>(config: &RunConfig, body: T) -> Manifest<T> {
    Manifest {
        provenance: Provenance::of(config),
        body,
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    corpus_digest: String,
    train: usize,
    val: usize,
    test: usize,
}

pub fn gen_corpus_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<Corpus, PipelineError> {
    let t = Instant::now();
    let corpus = gen_corpus(&config.corpus, config.seeds.corpus)?;
    save_corpus(&corpus, &ws.corpus_dir())?;
    write_json(
        &ws.corpus_dir().join("manifest.json"),
        &manifest(
            config,
            CorpusManifest {
                corpus_digest: corpus.config_digest(),
                train: corpus.train.len(),
                val: corpus.val.len(),
                test: corpus.test.len(),
            },
        ),
    )?;
    timing.record("gen-corpus", t);
    Ok(corpus)
}

fn load_run_corpus(config: &RunConfig, ws: &Workspace) -> Result<Corpus, PipelineError> {
    let dir = ws.corpus_dir();
    if !dir.join(split_file(Split::Train)).exists() {
        return Err(PipelineError::missing("corpus", dir));
    }
    let corpus = load_corpus(&dir)?;
    if corpus.config != config.corpus || corpus.seed != config.seeds.corpus {
        return Err(PipelineError::Artifact {
            path: dir.display().to_string(),
            reason: "corpus on disk was generated with a different config or seed".into(),
        });
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct MemberEntry {
    name: String,
    architecture: Architecture,
    seed: u64,
    training: TrainingMeta,
}

pub fn train_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<(), PipelineError> {
    let corpus = load_run_corpus(config, ws)?;
    let members = needed_members(config);
    let trained = parallel_map(&members, config.workers, |m| {
        let t = Instant::now();
        let model = AfpModel::build(m.architecture, m.seed(&config.seeds), ModelDims::default());
        let mut log: Vec<LossLogEntry> = Vec::new();
        let ckpt = train(model, &corpus, &config.training, |e| {
            log::info!("{}: {:?}", m.name(), e);
            log.push(e.clone());
        })?;
        save_checkpoint(&ckpt, &ws.checkpoint(&m.name()))?;
        write_jsonl(&ws.loss_log(&m.name()), &Provenance::of(config), &log)?;
        Ok((ckpt.meta, t.elapsed().as_secs_f64()))
    })?;
    let mut entries = Vec::with_capacity(members.len());
    for (m, (meta, secs)) in members.iter().zip(trained) {
        timing.seconds.insert(format!("train.{}", m.name()), secs);
        entries.push(MemberEntry {
            name: m.name(),
            architecture: m.architecture,
            seed: m.seed(&config.seeds),
            training: meta,
        });
    }
    #[derive(Serialize)]
    struct Body {
        members: Vec<MemberEntry>,
    }
    write_json(&ws.checkpoints_dir().join("manifest.json"), &manifest(config, Body { members: entries }))
}

fn load_member(ws: &Workspace, m: &Member) -> Result<AfpCheckpoint, PipelineError> {
    let path = ws.checkpoint(&m.name());
    if !path.exists() {
        return Err(PipelineError::missing("checkpoint", path));
    }
    Ok(load_checkpoint(&path)?)
}

fn build_ensembles(config: &RunConfig, ws: &Workspace) -> Result<Vec<(Ensemble, [Member; 2])>, PipelineError> {
    let mut cache: BTreeMap<Member, Arc<AfpCheckpoint>> = BTreeMap::new();
    let mut out = Vec::new();
    for (label, members) in member_plan(config) {
        let mut ckpts = Vec::with_capacity(2);
        for m in &members {
            if !cache.contains_key(m) {
                cache.insert(*m, Arc::new(load_member(ws, m)?));
            }
            ckpts.push(cache[m].clone());
        }
        out.push((build_ensemble(ckpts, label)?, members));
    }
    Ok(out)
}

#[derive(Clone, Serialize, Deserialize)]
struct EnsembleEntry {
    label: EnsembleLabel,
    members: [String; 2],
}

pub fn ensemble_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<Vec<DiversityReport>, PipelineError> {
    let t = Instant::now();
    let corpus = load_run_corpus(config, ws)?;
    let ensembles = build_ensembles(config, ws)?;
    let entries: Vec<EnsembleEntry> = ensembles
        .iter()
        .map(|(e, m)| EnsembleEntry {
            label: e.label.clone(),
            members: m.map(|m| m.name()),
        })
        .collect();
    #[derive(Serialize)]
    struct Body {
        ensembles: Vec<EnsembleEntry>,
    }
    write_json(&ws.ensembles(), &manifest(config, Body { ensembles: entries }))?;
    let reports = ensembles
        .iter()
        .map(|(e, _)| diversity_report(e, &corpus.test, config.diversity_tau))
        .collect::<Result<Vec<_>, _>>()?;
    #[derive(Serialize)]
    struct DivBody<'a> {
        reports: &'a [DiversityReport],
    }
    write_json(&ws.diversity(), &manifest(config, DivBody { reports: &reports }))?;
    timing.record("ensemble", t);
    Ok(reports)
}

fn noise_seed(seeds: &Seeds, member: &str, utterance: &str) -> u64 {
    derive_seed(seeds.noise, &format!("{member}/{utterance}"))
}

pub fn render_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<(), PipelineError> {
    let t = Instant::now();
    let corpus = load_run_corpus(config, ws)?;
    let provenance = Provenance::of(config);
    for (ensemble, members) in build_ensembles(config, ws)? {
        let clipped = parallel_map(&corpus.test, config.workers, |u: &Utterance| {
            let input = AfpInput::new(&u.phones, u.style_id);
            let phones: Vec<usize> = u.phones.iter().map(|p| p.id).collect();
            let mut clipped = [0usize; 2];
            for (idx, member) in members.iter().enumerate() {
                let predicted = ensemble.member(idx).model.predict(&input)?;
                let header = FeatureHeader {
                    provenance: provenance.clone(),
                    utterance_id: u.id.clone(),
                    member_index: idx,
                    member: member.name(),
                };
                write_features(&ws.features(&ensemble.label, &u.id, idx), &header, &phones, &predicted)?;
                let tracks = render_contours(&predicted, &config.render.denorm);
                let wave = synthesize(&tracks, noise_seed(&config.seeds, &member.name(), &u.id));
                clipped[idx] = wave.clipped;
                write_wav(&wave, &ws.wav(&ensemble.label, &u.id, idx))?;
            }
            Ok((u.id.clone(), clipped))
        })?;
        #[derive(Serialize)]
        struct Body {
            ensemble: EnsembleLabel,
            members: [String; 2],
            clipped_samples: BTreeMap<String, [usize; 2]>,
        }
        write_json(
            &ws.renditions_dir(&ensemble.label).join("manifest.json"),
            &manifest(
                config,
                Body {
                    ensemble: ensemble.label.clone(),
                    members: members.map(|m| m.name()),
                    clipped_samples: clipped.into_iter().collect(),
                },
            ),
        )?;
    }
    timing.record("render", t);
    Ok(())
}

type FeaturePair = (String, [(FeatureHeader, ProsodyTargets); 2]);

fn load_feature_pairs(config: &RunConfig, ws: &Workspace, label: &EnsembleLabel) -> Result<Vec<FeaturePair>, PipelineError> {
    let corpus = load_run_corpus(config, ws)?;
    corpus
        .test
        .iter()
        .map(|u| {
            let a = read_features(&ws.features(label, &u.id, 0))?;
            let b = read_features(&ws.features(label, &u.id, 1))?;
            Ok((u.id.clone(), [a, b]))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub pairs: usize,
    pub counters: StageCounters,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ScoresHeader {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub ensemble: EnsembleLabel,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ScoreSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    /// Ensemble slug → criterion label → cost.
    pub ensembles: BTreeMap<String, BTreeMap<String, CostSummary>>,
}

/// Scores one pair with fresh renditions, so counters belong to `criterion`.
fn score_pair(
    config: &RunConfig,
    pair: &FeaturePair,
    criterion: CriterionSpec,
) -> Result<(SelectionResult, StageCounters), PipelineError> {
    let (id, sides) = pair;
    let renditions: Vec<Rendition> = sides
        .iter()
        .enumerate()
        .map(|(idx, (h, t))| {
            Rendition::from_features(id, idx, t.clone(), noise_seed(&config.seeds, &h.member, id), config.render)
        })
        .collect();
    let result = select([&renditions[0], &renditions[1]], criterion)?;
    let mut counters = renditions[0].counters();
    counters += renditions[1].counters();
    Ok((result, counters))
}

pub fn score_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<(), PipelineError> {
    let t = Instant::now();
    let mut summary = BTreeMap::new();
    for label in &config.ensembles {
        let pairs = load_feature_pairs(config, ws, label)?;
        let mut rows = Vec::new();
        let mut costs = BTreeMap::new();
        for criterion in &config.criteria {
            let started = Instant::now();
            let scored = parallel_map(&pairs, config.workers, |p| score_pair(config, p, *criterion))?;
            timing.record(format!("score.{}.{}", super::artifacts::label_slug(label), criterion.label()), started);
            let mut cost = CostSummary {
                pairs: scored.len(),
                ..CostSummary::default()
            };
            for (result, counters) in scored {
                cost.counters += counters;
                rows.push(result);
            }
            costs.insert(criterion.label(), cost);
        }
        let header = ScoresHeader {
            provenance: Provenance::of(config),
            ensemble: label.clone(),
        };
        write_jsonl(&ws.scores(label), &header, &rows)?;
        summary.insert(super::artifacts::label_slug(label), costs);
    }
    write_json(
        &ws.score_summary(),
        &ScoreSummary {
            provenance: Provenance::of(config),
            ensembles: summary,
        },
    )?;
    timing.record("score", t);
    Ok(())
}

pub(crate) fn read_scores(ws: &Workspace, label: &EnsembleLabel) -> Result<Vec<SelectionResult>, PipelineError> {
    let (_, rows): (ScoresHeader, Vec<SelectionResult>) = read_jsonl("scores", &ws.scores(label))?;
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RecordsHeader {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub ensemble: EnsembleLabel,
    pub panel: PanelConfig,
    pub panel_seed: u64,
}

pub fn simulate_stage(config: &RunConfig, ws: &Workspace, timing: &mut Timing) -> Result<(), PipelineError> {
    let t = Instant::now();
    let label = &config.study_ensemble;
    let pairs = load_feature_pairs(config, ws, label)?;
    let proxy = |panel: &PanelConfig| -> Vec<ProxyPair> {
        pairs
            .iter()
            .map(|(id, sides)| ProxyPair {
                utterance_id: id.clone(),
                values: [0, 1].map(|i| {
                    let tracks = render_contours(&sides[i].1, &config.render.denorm);
                    panel.proxy.measure(&tracks).unwrap_or(0.0)
                }),
            })
            .collect()
    };
    let mut runs = vec![(config.panel, config.seeds.panel, false)];
    if config.negative_control {
        let control = PanelConfig {
            proxy: ExpressivityProxy::Random,
            ..config.panel
        };
        runs.push((control, derive_seed(config.seeds.panel, "negative-control"), true));
    }
    for (panel, seed, control) in runs {
        let records = simulate_preferences(&proxy(&panel), &panel, seed)?;
        let header = RecordsHeader {
            provenance: Provenance::of(config),
            ensemble: label.clone(),
            panel,
            panel_seed: seed,
        };
        write_jsonl(&ws.records(label, control), &header, &records)?;
    }
    timing.record("simulate", t);
    Ok(())
}

/// The full protocol, stage by stage, then the report.
pub fn evaluate(config: &RunConfig, ws: &Workspace) -> Result<RunResults, PipelineError> {
    let mut timing = Timing::default();
    let t = Instant::now();
    gen_corpus_stage(config, ws, &mut timing)?;
    train_stage(config, ws, &mut timing)?;
    ensemble_stage(config, ws, &mut timing)?;
    render_stage(config, ws, &mut timing)?;
    score_stage(config, ws, &mut timing)?;
    simulate_stage(config, ws, &mut timing)?;
    timing.record("evaluate", t);
    timing.save(ws)?;
    report_stage(config, ws)
}

/// Inputs for scoring a pair outside a pipeline run.
#[derive(Clone, Debug, Default)]
pub struct StandaloneInput {
    pub features: Option<[PathBuf; 2]>,
    pub wavs: Option<[PathBuf; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandaloneScore {
    pub result: SelectionResult,
    pub counters: [StageCounters; 2],
}

fn wav_utterance_id(path: &std::path::Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix(".A")
        .or_else(|| stem.strip_suffix(".B"))
        .unwrap_or(&stem)
        .to_string()
}

/// Scores a pair from feature files and/or WAVs. Audio-based criteria use
/// the WAVs when given and otherwise synthesize from the features.
pub fn score_standalone(
    input: &StandaloneInput,
    criterion: CriterionSpec,
    settings: RenderSettings,
    noise: u64,
) -> Result<StandaloneScore, PipelineError> {
    let use_wavs = input.wavs.is_some() && (input.features.is_none() || criterion.kind != crate::criteria::CriterionKind::AfpF0);
    let renditions: Vec<Rendition> = if use_wavs {
        let wavs = input.wavs.as_ref().expect("checked");
        wavs.iter()
            .enumerate()
            .map(|(idx, p)| Ok(Rendition::from_waveform(&wav_utterance_id(p), idx, read_wav(p)?, settings)))
            .collect::<Result<_, PipelineError>>()?
    } else if let Some(features) = &input.features {
        features
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let (h, t) = read_features(p)?;
                let seed = derive_seed(noise, &format!("{}/{}", h.member, h.utterance_id));
                Ok(Rendition::from_features(&h.utterance_id, idx, t, seed, settings))
            })
            .collect::<Result<_, PipelineError>>()?
    } else {
        return Err(PipelineError::Config("standalone scoring needs feature files or WAVs".into()));
    };
    let result = select([&renditions[0], &renditions[1]], criterion)?;
    Ok(StandaloneScore {
        result,
        counters: [renditions[0].counters(), renditions[1].counters()],
    })
}

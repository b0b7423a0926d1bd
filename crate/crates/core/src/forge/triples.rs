//! Reflection triples: edit with a round-robin editor, reflect on the result,
//! correct it when the reflection asks for it, balance the classes and tag
//! every retained triple with a VIEScore of its generated image.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{allocate, shuffled, write_json, write_jsonl, CompositionTarget, Deficit, ForgeError, Reject};
use crate::backends::{edit_image, EditRequest, GeneratorBackend};
use crate::engine::{derive_seed, EDIT_STREAM};
use crate::reasoner::Reasoner;
use crate::types::{ConclusionTag, ImageRef, Instruction, InvariantError, ReflectionVariant, VieScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleOutcome {
    Success,
    Reflection,
    Failed,
}

impl TripleOutcome {
    pub const ALL: [TripleOutcome; 3] = [TripleOutcome::Success, TripleOutcome::Reflection, TripleOutcome::Failed];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TripleOutcome::Success => "success",
            TripleOutcome::Reflection => "reflection",
            TripleOutcome::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTriple {
    pub id: String,
    pub editor: String,
    pub input: ImageRef,
    pub edit_instruction: Instruction,
    pub generated: ImageRef,
    pub reflection_instruction: Option<Instruction>,
    /// Equal to `generated` for success and failed triples.
    pub corrected: ImageRef,
    pub vie: Option<VieScore>,
    pub outcome: TripleOutcome,
}

impl ReflectionTriple {
    pub fn validate(&self) -> Result<(), InvariantError> {
        match self.outcome {
            TripleOutcome::Success if self.generated.sha256 != self.corrected.sha256 => Err(InvariantError::new(
                "corrected",
                "success triple must repeat the generated image",
            )),
            TripleOutcome::Reflection if self.reflection_instruction.is_none() => Err(InvariantError::new(
                "reflection_instruction",
                "required for reflection triples",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSource {
    pub id: String,
    pub image: ImageRef,
    pub instruction: Instruction,
}

/// Retained triples in source order, with what was produced and dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleSet {
    pub triples: Vec<ReflectionTriple>,
    /// Candidates per class before balancing (success, reflection, failed).
    pub candidates: [usize; 3],
    pub skipped: Vec<Reject>,
}

impl TripleSet {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in &self.triples {
            c[t.outcome.index()] += 1;
        }
        c
    }
}

const CORRECT_STREAM: u64 = 0x6669_7865;
const REFLECT_STREAM: u64 = 0x7265_666c;

fn edit_name(k: usize) -> String {
    format!("editor-{k}")
}

/// Largest total not above `cap` whose allocation fits in `available`.
fn achievable(cap: usize, weights: &[f64; 3], available: &[usize; 3]) -> (usize, Vec<usize>) {
    (0..=cap)
        .rev()
        .map(|n| (n, allocate(n, weights)))
        .find(|(_, alloc)| alloc.iter().zip(available).all(|(a, b)| a <= b))
        .unwrap_or((0, vec![0; 3]))
}

pub fn build_reflection_triples(
    sources: &[EditSource],
    editors: &[Arc<dyn GeneratorBackend>],
    reasoner: &Reasoner,
    target: &CompositionTarget,
    seed: u64,
    concurrency: usize,
) -> Result<TripleSet, ForgeError> {
    target.validate()?;
    if editors.is_empty() {
        return Err(ForgeError::Precondition("at least one editor backend is required".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| ForgeError::Precondition(e.to_string()))?;
    let produced: Vec<Result<ReflectionTriple, Reject>> = pool.install(|| {
        sources
            .par_iter()
            .enumerate()
            .map(|(i, s)| candidate(i, s, editors, reasoner, seed))
            .collect()
    });

    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for r in produced {
        match r {
            Ok(t) => candidates.push(t),
            Err(reject) => skipped.push(reject),
        }
    }
    let mut available = [0usize; 3];
    for t in &candidates {
        available[t.outcome.index()] += 1;
    }
    if available.contains(&0) {
        let wanted = allocate(target.total, &target.triple_ratio);
        return Err(ForgeError::Shortfall(
            TripleOutcome::ALL
                .iter()
                .map(|o| Deficit {
                    bucket: o.name().to_string(),
                    wanted: wanted[o.index()],
                    available: available[o.index()],
                })
                .filter(|d| d.available < d.wanted)
                .collect(),
        ));
    }

    let (_, quota) = achievable(target.total, &target.triple_ratio, &available);
    let mut keep = vec![false; candidates.len()];
    for outcome in TripleOutcome::ALL {
        let members: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].outcome == outcome)
            .collect();
        for i in shuffled(members, seed, outcome.index() as u64 + 16)
            .into_iter()
            .take(quota[outcome.index()])
        {
            keep[i] = true;
        }
    }
    let triples = candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(t, k)| k.then_some(t))
        .collect();
    Ok(TripleSet {
        triples,
        candidates: available,
        skipped,
    })
}

fn candidate(
    i: usize,
    source: &EditSource,
    editors: &[Arc<dyn GeneratorBackend>],
    reasoner: &Reasoner,
    seed: u64,
) -> Result<ReflectionTriple, Reject> {
    let k = i % editors.len();
    let editor = editors[k].as_ref();
    let reject = |stage: &str, reason: String| Reject {
        id: source.id.clone(),
        stage: stage.to_string(),
        reason,
    };
    let request = EditRequest::new(
        source.image.clone(),
        source.instruction.clone(),
        derive_seed(seed, EDIT_STREAM, i as u64),
    );
    let generated = edit_image(editor, &request).map_err(|e| reject("edit", e.to_string()))?;
    let reflection = reasoner
        .clone()
        .with_seed(Some(derive_seed(seed, REFLECT_STREAM, i as u64)))
        .reflect(ReflectionVariant::MultiRound, &source.image, &generated, &source.instruction)
        .map_err(|e| reject("reflect", e.to_string()))?;
    let conclusion = reflection.conclusion;
    let (outcome, corrected) = match conclusion.tag {
        ConclusionTag::Success => (TripleOutcome::Success, generated.clone()),
        ConclusionTag::Failed => (TripleOutcome::Failed, generated.clone()),
        ConclusionTag::Reflect => {
            let refinement = conclusion
                .refinement_instruction
                .clone()
                .expect("validated Reflect carries an instruction");
            let fix = EditRequest::new(generated.clone(), refinement, derive_seed(seed, CORRECT_STREAM, i as u64));
            let corrected = edit_image(editor, &fix).map_err(|e| reject("correct", e.to_string()))?;
            (TripleOutcome::Reflection, corrected)
        }
    };
    let triple = ReflectionTriple {
        id: source.id.clone(),
        editor: edit_name(k),
        input: source.image.clone(),
        edit_instruction: source.instruction.clone(),
        generated,
        reflection_instruction: conclusion.refinement_instruction,
        corrected,
        vie: None,
        outcome,
    };
    triple.validate().map_err(|e| reject("screen", e.to_string()))?;
    Ok(triple)
}

/// Score each triple's generated image against its edit instruction. Judge
/// failures reject the triple rather than defaulting its score.
pub fn tag_viescores(
    triples: Vec<ReflectionTriple>,
    judge: &Reasoner,
    seed: u64,
    concurrency: usize,
) -> Result<(Vec<ReflectionTriple>, Vec<Reject>), ForgeError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| ForgeError::Precondition(e.to_string()))?;
    let scored: Vec<Result<ReflectionTriple, Reject>> = pool.install(|| {
        triples
            .into_par_iter()
            .enumerate()
            .map(|(i, mut t)| {
                let judge = judge.clone().with_seed(Some(derive_seed(seed, REFLECT_STREAM ^ 1, i as u64)));
                match judge.score_vie(&t.input, &t.generated, &t.edit_instruction) {
                    Ok(v) => {
                        t.vie = Some(v);
                        Ok(t)
                    }
                    Err(e) => Err(Reject {
                        id: t.id.clone(),
                        stage: "score".into(),
                        reason: e.to_string(),
                    }),
                }
            })
            .collect()
    });
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in scored {
        match r {
            Ok(t) => kept.push(t),
            Err(e) => rejected.push(e),
        }
    }
    Ok((kept, rejected))
}

/// Build, balance and tag into `out`: `reflection_triples.jsonl`,
/// `rejects.jsonl` and `composition_report.json`.
pub fn forge_triples_to_dir(
    sources: &[EditSource],
    editors: &[Arc<dyn GeneratorBackend>],
    reasoner: &Reasoner,
    target: &CompositionTarget,
    seed: u64,
    concurrency: usize,
    out: &Path,
) -> Result<Vec<ReflectionTriple>, ForgeError> {
    std::fs::create_dir_all(out)?;
    let set = match build_reflection_triples(sources, editors, reasoner, target, seed, concurrency) {
        Ok(set) => set,
        Err(e) => {
            let shortfall = match &e {
                ForgeError::Shortfall(d) => json!(d),
                other => json!(other.to_string()),
            };
            write_json(
                &out.join("composition_report.json"),
                &json!({"dataset": "reflection_triples", "sources": sources.len(), "total": 0, "shortfall": shortfall}),
            )?;
            write_jsonl::<ReflectionTriple>(&out.join("reflection_triples.jsonl"), &[])?;
            return Err(e);
        }
    };
    let (tagged, score_rejects) = tag_viescores(set.triples.clone(), reasoner, seed, concurrency)?;
    let mut rejects = set.skipped.clone();
    rejects.extend(score_rejects);
    write_jsonl(&out.join("reflection_triples.jsonl"), &tagged)?;
    write_jsonl(&out.join("rejects.jsonl"), &rejects)?;

    let wanted = allocate(target.total, &target.triple_ratio);
    let mut classes = serde_json::Map::new();
    for o in TripleOutcome::ALL {
        let count = tagged.iter().filter(|t| t.outcome == o).count();
        classes.insert(
            o.name().to_string(),
            json!({
                "target": wanted[o.index()],
                "candidates": set.candidates[o.index()],
                "count": count,
                "fraction": if tagged.is_empty() { 0.0 } else { count as f64 / tagged.len() as f64 },
            }),
        );
    }
    let mut per_editor = std::collections::BTreeMap::<String, usize>::new();
    for t in &tagged {
        *per_editor.entry(t.editor.clone()).or_default() += 1;
    }
    write_json(
        &out.join("composition_report.json"),
        &json!({
            "dataset": "reflection_triples",
            "sources": sources.len(),
            "total": tagged.len(),
            "target_total": target.total,
            "triple_ratio": target.triple_ratio,
            "classes": classes,
            "editors": per_editor,
            "rejects": rejects.len(),
            "shortfall": serde_json::Value::Null,
        }),
    )?;
    Ok(tagged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::world::{SimulatedWorld, WorldConfig};
    use crate::backends::{RecordingGenerator, ScriptRule, ScriptedGenerator, ScriptedReasoner};
    use crate::image_store::{synth_png, ImageStore};
    use crate::reasoner::TemplateSet;

    fn sources(store: &ImageStore, n: usize) -> Vec<EditSource> {
        (0..n)
            .map(|i| EditSource {
                id: format!("s{i}"),
                image: store.put(synth_png(format!("src-{i}").as_bytes())).unwrap(),
                instruction: Instruction::concrete(format!("Add object number {i}.")).unwrap(),
            })
            .collect()
    }

    fn world(store: Arc<ImageStore>, flaw: f64, correction: f64) -> Arc<SimulatedWorld> {
        SimulatedWorld::new(
            WorldConfig {
                flaw_probability: flaw,
                correction_probability: correction,
                quality_noise_sd: 0.0,
                base_quality: 8.0,
            },
            1,
            store,
        )
    }

    fn reasoner(world: &Arc<SimulatedWorld>) -> Reasoner {
        Reasoner::new(Arc::new(world.reasoner()), Arc::new(TemplateSet::builtin()))
    }

    #[test]
    fn flawless_world_gives_identity_success_triples() {
        let store = Arc::new(ImageStore::in_memory());
        let src = sources(&store, 20);
        let w = world(store, 0.0, 1.0);
        let err = build_reflection_triples(&src, &[Arc::new(w.generator())], &reasoner(&w), &CompositionTarget::with_total(20), 0, 2)
            .unwrap_err();
        // Only one class exists, so no 3:1:1 mix is possible.
        match err {
            ForgeError::Shortfall(d) => assert_eq!(d.iter().map(|x| x.bucket.as_str()).collect::<Vec<_>>(), ["reflection", "failed"]),
            other => panic!("{other}"),
        }

        let editors: Vec<Arc<dyn GeneratorBackend>> = vec![Arc::new(w.generator())];
        let produced: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(i, s)| candidate(i, s, &editors, &reasoner(&w), 0).unwrap())
            .collect();
        assert!(produced.iter().all(|t| t.outcome == TripleOutcome::Success));
        assert!(produced.iter().all(|t| t.generated.sha256 == t.corrected.sha256));
    }

    #[test]
    fn editors_are_assigned_round_robin() {
        let store = Arc::new(ImageStore::in_memory());
        let src = sources(&store, 8);
        let recorders: Vec<Arc<RecordingGenerator<ScriptedGenerator>>> = (0..4)
            .map(|_| Arc::new(RecordingGenerator::new(ScriptedGenerator::new(vec![], store.clone()))))
            .collect();
        let editors: Vec<Arc<dyn GeneratorBackend>> =
            recorders.iter().map(|r| r.clone() as Arc<dyn GeneratorBackend>).collect();
        let judge = Reasoner::new(
            Arc::new(ScriptedReasoner::new(vec![
                ScriptRule::label("describe", "A target."),
                ScriptRule::label("assess", r#"{"consistency_score": 9}"#),
                ScriptRule::any("Looks right. <#Success>").containing("object number 1."),
                ScriptRule::any("Flawed. <#Failed>").containing("object number 2."),
                ScriptRule::any("Off. <#Reflection> Fix the object."),
            ])),
            Arc::new(TemplateSet::builtin()),
        );
        let set = build_reflection_triples(&src, &editors, &judge, &CompositionTarget::with_total(5), 0, 3).unwrap();
        for r in &recorders {
            let fresh = r.requests().iter().filter(|q| q.instruction.text.starts_with("Add")).count();
            assert_eq!(fresh, 2);
        }
        assert_eq!(set.candidates.iter().sum::<usize>(), 8);
        for t in &set.triples {
            t.validate().unwrap();
        }
    }

    #[test]
    fn mixed_world_balances_to_three_one_one() {
        let store = Arc::new(ImageStore::in_memory());
        let src = sources(&store, 500);
        let w = world(store, 0.5, 1.0);
        let base = w.config().clone();
        let broken = WorldConfig {
            correction_probability: 0.0,
            ..base.clone()
        };
        let editors: Vec<Arc<dyn GeneratorBackend>> = (0..5)
            .map(|k| {
                let cfg = if k == 4 { &broken } else { &base };
                Arc::new(w.editor(format!("e{k}"), cfg)) as Arc<dyn GeneratorBackend>
            })
            .collect();
        let set = build_reflection_triples(&src, &editors, &reasoner(&w), &CompositionTarget::with_total(500), 5, 4).unwrap();
        let [s, r, f] = set.counts();
        assert!(f > 0 && r > 0 && s > 0);
        let n = (s + r + f) as f64;
        for (got, want) in [(s, 0.6), (r, 0.2), (f, 0.2)] {
            assert!((got as f64 / n - want).abs() <= 0.1 * want, "{s}/{r}/{f}");
        }
        assert!(set
            .triples
            .iter()
            .filter(|t| t.outcome == TripleOutcome::Success)
            .all(|t| t.generated.sha256 == t.corrected.sha256));
        let reflected = set.triples.iter().filter(|t| t.outcome == TripleOutcome::Reflection);
        assert!(reflected.into_iter().all(|t| w.flaw_count(&t.corrected) == 0));
    }

    #[test]
    fn scoring_uses_world_quality_and_rejects_bad_judgements() {
        let store = Arc::new(ImageStore::in_memory());
        let src = sources(&store, 6);
        let w = world(store.clone(), 0.5, 1.0);
        let editors: Vec<Arc<dyn GeneratorBackend>> = vec![Arc::new(w.generator())];
        let produced: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(i, s)| candidate(i, s, &editors, &reasoner(&w), 0).unwrap())
            .collect();
        let (tagged, rejected) = tag_viescores(produced.clone(), &reasoner(&w), 0, 2).unwrap();
        assert!(rejected.is_empty());
        for t in &tagged {
            let v = t.vie.unwrap();
            assert_eq!(v.overall, crate::types::quantize_score(w.quality(&t.generated)));
        }

        let fixed = Reasoner::new(
            Arc::new(ScriptedReasoner::new(vec![ScriptRule::any(
                r#"{"semantic_consistency": 8, "perceptual_quality": 8}"#,
            )])),
            Arc::new(TemplateSet::builtin()),
        );
        let (tagged, _) = tag_viescores(produced.clone(), &fixed, 0, 2).unwrap();
        assert!(tagged.iter().all(|t| t.vie.unwrap().overall == 8.0));

        let negative = Reasoner::new(
            Arc::new(ScriptedReasoner::new(vec![ScriptRule::any(
                r#"{"semantic_consistency": -1, "perceptual_quality": 8}"#,
            )])),
            Arc::new(TemplateSet::builtin()),
        );
        let (tagged, rejected) = tag_viescores(produced, &negative, 0, 2).unwrap();
        assert!(tagged.is_empty());
        assert_eq!(rejected.len(), 6);
        assert!(rejected.iter().all(|r| r.stage == "score"));
    }

    #[test]
    fn achievable_composition() {
        assert_eq!(achievable(500, &[3.0, 1.0, 1.0], &[600, 480, 120]), (500, vec![300, 100, 100]));
        assert_eq!(achievable(500, &[3.0, 1.0, 1.0], &[250, 200, 50]), (253, vec![152, 51, 50]));
    }
}

use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;

use super::*;
use crate::backends::world::{SimulatedWorld, WorldConfig};
use crate::backends::{RecordingGenerator, RecordingReasoner, ScriptRule, ScriptedGenerator, ScriptedReasoner};
use crate::image_store::{synth_png, ImageStore};
use crate::reasoner::{labels, TemplateSet};
use crate::trace::serialize_trace;
use crate::types::{ReflectionVariant, VieScore};

struct Rig {
    world: Arc<SimulatedWorld>,
    reasoner: Arc<RecordingReasoner<crate::backends::world::WorldReasoner>>,
    generator: Arc<RecordingGenerator<crate::backends::world::WorldGenerator>>,
    reference: ImageRef,
}

impl Rig {
    fn new(config: WorldConfig) -> Self {
        let store = Arc::new(ImageStore::in_memory());
        let reference = store.put(synth_png(b"reference")).unwrap();
        let world = SimulatedWorld::new(config, 11, store);
        Self {
            reasoner: Arc::new(RecordingReasoner::new(world.reasoner())),
            generator: Arc::new(RecordingGenerator::new(world.generator())),
            world,
            reference,
        }
    }

    fn engine(&self) -> Engine {
        let reasoner = Reasoner::new(self.reasoner.clone(), Arc::new(TemplateSet::builtin()));
        Engine::new(reasoner, self.generator.clone()).with_clock(Arc::new(FrozenClock))
    }

    fn run(&self, policy: LoopPolicy, seed: u64) -> SessionRun {
        let instruction = Instruction::new("Add a red hat to the cat.", crate::types::InstructionKind::Abstract).unwrap();
        self.engine().run_session(&self.reference, &instruction, policy, seed).unwrap()
    }

    fn labels(&self) -> Vec<String> {
        self.reasoner.requests().into_iter().map(|r| r.label).collect()
    }
}

fn world(flaw: f64, correction: f64, noise: f64) -> WorldConfig {
    WorldConfig {
        flaw_probability: flaw,
        correction_probability: correction,
        quality_noise_sd: noise,
        base_quality: 8.0,
    }
}

#[test]
fn stopping_round_examples() {
    assert_eq!(select_stopping_round(&[(0, 6.0), (1, 7.2), (2, 7.1)]).unwrap(), 1);
    assert_eq!(select_stopping_round(&[(0, 7.0), (1, 7.0)]).unwrap(), 0);
    assert_eq!(select_stopping_round(&[(1, 7.0), (0, 7.0)]).unwrap(), 0);
    assert_eq!(select_stopping_round(&[(0, 3.3)]).unwrap(), 0);
    assert_eq!(select_stopping_round(&[]), Err(EngineError::EmptySelection));
}

#[test]
fn cumulative_best_examples() {
    let rising = [58.64, 60.08, 60.93, 60.99, 61.07];
    assert_eq!(cumulative_best(&rising), rising);
    assert_eq!(
        cumulative_best(&[58.64, 58.84, 59.00, 59.24, 59.09]),
        [58.64, 58.84, 59.00, 59.24, 59.24]
    );
    assert_eq!(cumulative_best(&[5.0, 4.0, 3.0]), [5.0, 5.0, 5.0]);
}

#[test]
fn seeds_and_ids_are_stable() {
    assert_eq!(derive_seed(1, EDIT_STREAM, 0), derive_seed(1, EDIT_STREAM, 0));
    assert_ne!(derive_seed(1, EDIT_STREAM, 0), derive_seed(1, EDIT_STREAM, 1));
    assert_ne!(derive_seed(1, EDIT_STREAM, 0), derive_seed(1, SESSION_STREAM, 0));
    let id = session_uuid(42);
    assert_eq!(id, session_uuid(42));
    assert_eq!(id.get_version_num(), 4);
}

#[test]
fn flawless_world_succeeds_in_one_round() {
    let rig = Rig::new(world(0.0, 0.9, 0.3));
    let run = rig.run(LoopPolicy::default(), 1);
    let outcome = run.outcome.unwrap();
    assert_eq!(outcome.rounds_executed, 1);
    assert_eq!(outcome.status, SessionStatus::Succeeded);
    assert_eq!(run.session.rounds[0].conclusion.as_ref().unwrap().tag, ConclusionTag::Success);
}

#[test]
fn certain_flaw_is_fixed_by_first_refinement() {
    let rig = Rig::new(world(1.0, 1.0, 0.0));
    let run = rig.run(LoopPolicy::default(), 1);
    let outcome = run.outcome.unwrap();
    assert!(outcome.rounds_executed <= 3);
    assert_eq!(outcome.rounds_executed, 2);
    assert_eq!(outcome.status, SessionStatus::Succeeded);
    assert_eq!(outcome.chosen_round, 1);
    assert_eq!(rig.world.flaw_count(&outcome.final_image), 0);

    let rounds = &run.session.rounds;
    assert_eq!(rounds[0].conclusion.as_ref().unwrap().tag, ConclusionTag::Reflect);
    assert_eq!(rounds[1].conclusion.as_ref().unwrap().tag, ConclusionTag::Success);
    let edits = rig.generator.requests();
    assert_eq!(edits[1].reference, rounds[0].generated);
    assert_eq!(
        Some(&edits[1].instruction),
        rounds[0].conclusion.as_ref().unwrap().refinement_instruction.as_ref()
    );
}

#[test]
fn failed_conclusion_stops_without_further_edits() {
    let store = Arc::new(ImageStore::in_memory());
    let reference = store.put(synth_png(b"reference")).unwrap();
    let world = SimulatedWorld::new(world(1.0, 0.0, 0.0), 3, store);
    let generator = Arc::new(RecordingGenerator::new(world.generator()));
    let engine = Engine::new(
        Reasoner::new(Arc::new(world.reasoner()), Arc::new(TemplateSet::builtin())),
        generator.clone(),
    )
    .with_clock(Arc::new(FrozenClock));
    let run = engine
        .run_session(&reference, &Instruction::concrete("Add a hat.").unwrap(), LoopPolicy::default(), 5)
        .unwrap();
    assert_eq!(run.session.status, SessionStatus::Failed);
    assert_eq!(generator.requests().len(), 1);
    assert_eq!(run.outcome.unwrap().chosen_round, 0);
}

#[test]
fn base_mode_makes_no_reasoner_calls() {
    let rig = Rig::new(world(0.5, 0.9, 0.3));
    let run = rig.run(LoopPolicy::with_mode(LoopMode::Base), 1);
    assert!(rig.labels().is_empty());
    assert_eq!(run.session.rounds.len(), 1);
    assert!(run.session.thought.is_none());
    assert_eq!(rig.generator.requests()[0].instruction.text, "Add a red hat to the cat.");
    assert_eq!(run.session.status, SessionStatus::Succeeded);
}

#[test]
fn thinking_mode_edits_with_the_thought() {
    let store = Arc::new(ImageStore::in_memory());
    let reference = store.put(synth_png(b"reference")).unwrap();
    let backend = Arc::new(ScriptedReasoner::new(vec![ScriptRule::label(
        labels::THINK,
        "1. Render the leaves yellow.\n2. Desiccate the leaf tips.",
    )]));
    let generator = Arc::new(RecordingGenerator::new(ScriptedGenerator::new(vec![], store)));
    let engine = Engine::new(
        Reasoner::new(backend.clone(), Arc::new(TemplateSet::builtin())),
        generator.clone(),
    );
    let instruction = Instruction::new(
        "symptoms of potassium deficiency in leaves",
        crate::types::InstructionKind::Abstract,
    )
    .unwrap();
    let run = engine
        .run_session(&reference, &instruction, LoopPolicy::with_mode(LoopMode::Thinking), 0)
        .unwrap();
    assert_eq!(backend.requests().len(), 1);
    let edit = &generator.requests()[0];
    assert_eq!(edit.instruction.text, "Render the leaves yellow. Desiccate the leaf tips");
    assert_eq!(run.session.thought.as_ref(), Some(&edit.instruction));
    assert_eq!(run.session.rounds[0].instruction_used, edit.instruction);
}

#[test]
fn reroll_regenerates_from_reference() {
    let rig = Rig::new(world(0.5, 0.9, 0.3));
    let run = rig.run(LoopPolicy::reroll(2), 4);
    let edits = rig.generator.requests();
    assert_eq!(edits.len(), 3);
    assert!(edits.iter().all(|e| e.reference == rig.reference));
    let seeds: std::collections::BTreeSet<u64> = edits.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), 3);
    assert!(run.session.rounds.iter().all(|r| r.vie.is_some() && r.conclusion.is_none()));
    let labels = rig.labels();
    assert_eq!(labels.iter().filter(|l| *l == labels::SCORE).count(), 3);
    assert_eq!(labels.iter().filter(|l| *l == labels::THINK).count(), 1);
}

#[test]
fn scoring_uses_original_instruction() {
    let store = Arc::new(ImageStore::in_memory());
    let reference = store.put(synth_png(b"reference")).unwrap();
    let backend = Arc::new(ScriptedReasoner::new(vec![
        ScriptRule::label(labels::THINK, "Paint the hat crimson."),
        ScriptRule::label(labels::SCORE, r#"{"semantic_consistency": 8, "perceptual_quality": 8}"#),
        ScriptRule::label(labels::CONCLUDE_DUAL, "fine <#Success>"),
    ]));
    let engine = Engine::new(
        Reasoner::new(backend.clone(), Arc::new(TemplateSet::builtin())),
        Arc::new(ScriptedGenerator::new(vec![], store)),
    );
    let policy = LoopPolicy {
        reflection_variant: ReflectionVariant::DualImage,
        ..LoopPolicy::default()
    };
    let instruction = Instruction::new("make the hat pop", crate::types::InstructionKind::Abstract).unwrap();
    let run = engine.run_session(&reference, &instruction, policy, 0).unwrap();
    for r in backend.requests().iter().filter(|r| r.label != labels::THINK) {
        assert_eq!(r.context["instruction"], "make the hat pop", "{}", r.label);
    }
    assert_eq!(run.session.rounds[0].vie, Some(VieScore::new(8.0, 8.0).unwrap()));
}

struct FailAfter<G> {
    inner: G,
    allowed: usize,
    calls: AtomicUsize,
    refuse: bool,
}

impl<G: GeneratorBackend> GeneratorBackend for FailAfter<G> {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.allowed {
            return self.inner.edit(request);
        }
        if self.refuse {
            Err(BackendError::Refused {
                request_id: "req-test".into(),
                reason: "policy".into(),
            })
        } else {
            Err(BackendError::Transport {
                request_id: "req-test".into(),
                attempts: 3,
                message: "connection reset".into(),
            })
        }
    }
}

fn failing_run(allowed: usize, refuse: bool) -> SessionRun {
    let store = Arc::new(ImageStore::in_memory());
    let reference = store.put(synth_png(b"reference")).unwrap();
    let world = SimulatedWorld::new(world(1.0, 1.0, 0.0), 3, store);
    let generator = FailAfter {
        inner: world.generator(),
        allowed,
        calls: AtomicUsize::new(0),
        refuse,
    };
    let engine = Engine::new(
        Reasoner::new(Arc::new(world.reasoner()), Arc::new(TemplateSet::builtin())),
        Arc::new(generator),
    );
    engine
        .run_session(&reference, &Instruction::concrete("Add a hat.").unwrap(), LoopPolicy::default(), 5)
        .unwrap()
}

#[test]
fn backend_error_mid_session_keeps_best_scored_round() {
    let run = failing_run(1, false);
    assert_eq!(run.session.status, SessionStatus::Stopped);
    assert!(matches!(run.error, Some(EngineError::Generator(_))));
    assert_eq!(run.session.rounds.len(), 1);
    let outcome = run.outcome.unwrap();
    assert_eq!(outcome.chosen_round, 0);
    assert_eq!(outcome.status, SessionStatus::Stopped);
    run.session.validate().unwrap();

    let nothing = failing_run(0, false);
    assert!(nothing.outcome.is_none());
    assert_eq!(nothing.session.status, SessionStatus::Stopped);
}

#[test]
fn refusal_fails_the_session() {
    let run = failing_run(0, true);
    assert_eq!(run.session.status, SessionStatus::Failed);
    assert!(run.outcome.is_none());
}

#[test]
fn invalid_inputs_are_rejected_up_front() {
    let rig = Rig::new(world(0.5, 0.9, 0.3));
    let policy = LoopPolicy {
        max_reflection_rounds: 1,
        ..LoopPolicy::reroll(2)
    };
    let instruction = Instruction::concrete("Add a hat.").unwrap();
    let err = rig.engine().run_session(&rig.reference, &instruction, policy, 0).unwrap_err();
    assert!(matches!(err, EngineError::Invariant(e) if e.path == "policy.max_reflection_rounds"));
    assert!(rig.generator.requests().is_empty());
}

#[test]
fn traces_are_byte_identical_across_runs() {
    let a = Rig::new(world(0.5, 0.9, 0.3)).run(LoopPolicy::default(), 9);
    let b = Rig::new(world(0.5, 0.9, 0.3)).run(LoopPolicy::default(), 9);
    assert_eq!(serialize_trace(&a.session).unwrap(), serialize_trace(&b.session).unwrap());
}

#[test]
fn stop_on_success_disabled_keeps_editing_from_reference() {
    let rig = Rig::new(world(0.0, 0.9, 0.3));
    let policy = LoopPolicy {
        stop_on_success_tag: false,
        ..LoopPolicy::default()
    };
    let run = rig.run(policy, 2);
    assert_eq!(run.session.rounds.len(), 3);
    assert!(rig.generator.requests().iter().all(|e| e.reference == rig.reference));
    assert!(run.session.rounds[2].conclusion.is_none());
    assert!(run.session.rounds.iter().all(|r| r.vie.is_some()));
}

fn arb_policy() -> impl Strategy<Value = LoopPolicy> {
    (
        0u32..4,
        prop::sample::select(vec![
            ReflectionVariant::MultiRound,
            ReflectionVariant::SingleImage,
            ReflectionVariant::DualImage,
        ]),
        any::<bool>(),
    )
        .prop_map(|(budget, variant, stop)| LoopPolicy {
            max_reflection_rounds: budget,
            reflection_variant: variant,
            stop_on_success_tag: stop,
            ..LoopPolicy::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budget_and_stopping_laws(
        policy in arb_policy(),
        flaw in 0.0f64..=1.0,
        correction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let rig = Rig::new(world(flaw, correction, 0.3));
        let run = rig.run(policy, seed);
        let conclusions = run.session.rounds.iter().filter(|r| r.conclusion.is_some()).count();
        prop_assert!(conclusions <= policy.max_reflection_rounds as usize);
        prop_assert!(rig.generator.requests().len() <= policy.max_reflection_rounds as usize + 1);

        let outcome = run.outcome.unwrap();
        prop_assert!(outcome.chosen_round < outcome.rounds_executed);
        let scored: Vec<(u32, f64)> = run.session.rounds.iter().map(|r| (r.index, r.vie.unwrap().overall)).collect();
        prop_assert_eq!(outcome.chosen_round, select_stopping_round(&scored).unwrap());
        prop_assert_eq!(
            &outcome.final_image.sha256,
            &run.session.rounds[outcome.chosen_round as usize].generated.sha256
        );
        if run.session.status == SessionStatus::Failed {
            let last = run.session.rounds.last().unwrap();
            prop_assert_eq!(last.conclusion.as_ref().map(|c| c.tag), Some(ConclusionTag::Failed));
        }
        run.session.validate().unwrap();
    }

    #[test]
    fn selection_is_earliest_argmax(scores in prop::collection::vec(0u8..20, 1..12)) {
        let scored: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s as f64 / 2.0)).collect();
        let chosen = select_stopping_round(&scored).unwrap() as usize;
        let max = scored.iter().map(|s| s.1).fold(f64::MIN, f64::max);
        prop_assert_eq!(scored[chosen].1, max);
        prop_assert!(scored[..chosen].iter().all(|s| s.1 < max));
    }

    #[test]
    fn cumulative_best_is_monotone_running_max(xs in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        let best = cumulative_best(&xs);
        prop_assert_eq!(best.len(), xs.len());
        for i in 0..xs.len() {
            prop_assert!(best[i] >= xs[i]);
            prop_assert!(xs[..=i].contains(&best[i]));
            if i > 0 {
                prop_assert!(best[i] >= best[i - 1]);
            }
        }
    }
}

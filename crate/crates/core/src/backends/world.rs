//! Simulated world: a seeded reasoner/generator pair sharing hidden state.
//!
//! Every image the generator produces is registered with a hidden list of
//! flaws, keyed by the image digest. A fresh edit inherits its parent's flaws
//! and adds one with probability `flaw_probability`. An edit whose instruction
//! names a recorded flaw is a refinement: each named flaw is removed with the
//! editor's correction probability and no new flaw is introduced.
//!
//! The reasoner answers from the same hidden state: flaws become assessment
//! conflicts and a `<#Reflection>` conclusion naming them, a flawless image
//! concludes `<#Success>`, and flaws made by an editor that can never correct
//! them conclude `<#Failed>`. Both VIEScore axes equal
//! `clamp(base_quality - 3 * flaws + N(0, quality_noise_sd), 0, 10)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::annotator::OfflineAnnotator;
use super::{
    request_id, BackendError, ChatRequest, ChatResponse, EditRequest, GeneratorBackend,
    ReasonerBackend, Usage,
};
use crate::image_store::{synth_png, ImageStore};
use crate::reasoner::labels;
use crate::types::{ImageRef, InvariantError};

/// Quality lost per hidden flaw.
pub const FLAW_PENALTY: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub flaw_probability: f64,
    pub correction_probability: f64,
    pub quality_noise_sd: f64,
    pub base_quality: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            flaw_probability: 0.5,
            correction_probability: 0.9,
            quality_noise_sd: 0.3,
            base_quality: 8.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), InvariantError> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(InvariantError::new(name, format!("{p} outside [0, 1]")))
            }
        };
        unit("flaw_probability", self.flaw_probability)?;
        unit("correction_probability", self.correction_probability)?;
        if !(self.quality_noise_sd >= 0.0 && self.quality_noise_sd.is_finite()) {
            return Err(InvariantError::new("quality_noise_sd", "must be finite and >= 0"));
        }
        if !(0.0..=10.0).contains(&self.base_quality) {
            return Err(InvariantError::new("base_quality", "outside [0, 10]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Flaw {
    id: String,
    recoverable: bool,
}

#[derive(Debug, Clone, Default)]
struct ImageState {
    flaws: Vec<Flaw>,
    target: String,
}

pub struct SimulatedWorld {
    config: WorldConfig,
    seed: u64,
    store: Arc<ImageStore>,
    states: Mutex<HashMap<String, ImageState>>,
}

/// Build the coupled pair for `config`.
pub fn simulated_world(
    config: WorldConfig,
    seed: u64,
    store: Arc<ImageStore>,
) -> Result<(WorldReasoner, WorldGenerator), InvariantError> {
    config.validate()?;
    let world = SimulatedWorld::new(config, seed, store);
    Ok((world.reasoner(), world.generator()))
}

impl SimulatedWorld {
    pub fn new(config: WorldConfig, seed: u64, store: Arc<ImageStore>) -> Arc<Self> {
        Arc::new(Self {
            config,
            seed,
            store,
            states: Mutex::default(),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn reasoner(self: &Arc<Self>) -> WorldReasoner {
        WorldReasoner {
            world: self.clone(),
            annotator: OfflineAnnotator,
        }
    }

    pub fn generator(self: &Arc<Self>) -> WorldGenerator {
        self.editor("world", &self.config.clone())
    }

    /// A generator with its own flaw and correction probabilities.
    pub fn editor(self: &Arc<Self>, name: impl Into<String>, config: &WorldConfig) -> WorldGenerator {
        WorldGenerator {
            world: self.clone(),
            name: name.into(),
            flaw_probability: config.flaw_probability,
            correction_probability: config.correction_probability,
        }
    }

    /// Hidden summary of the intended result of `instruction`.
    pub fn target_summary(instruction: &str) -> String {
        format!(
            "The reference image after applying: {}",
            instruction.trim().trim_end_matches('.')
        )
    }

    fn state(&self, image: &ImageRef) -> ImageState {
        self.states
            .lock()
            .expect("world state poisoned")
            .get(&image.sha256)
            .cloned()
            .unwrap_or_default()
    }

    pub fn flaw_count(&self, image: &ImageRef) -> usize {
        self.state(image).flaws.len()
    }

    /// Noise-free quality for a given number of flaws.
    pub fn quality_of(&self, flaws: usize) -> f64 {
        (self.config.base_quality - FLAW_PENALTY * flaws as f64).clamp(0.0, 10.0)
    }

    /// Judged quality of an image, noise keyed by the image digest.
    pub fn quality(&self, image: &ImageRef) -> f64 {
        let mut rng = self.rng(&[b"score", image.sha256.as_bytes()]);
        let noise = Normal::new(0.0, self.config.quality_noise_sd)
            .expect("validated noise sd")
            .sample(&mut rng);
        (self.config.base_quality - FLAW_PENALTY * self.flaw_count(image) as f64 + noise)
            .clamp(0.0, 10.0)
    }

    fn rng(&self, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

pub struct WorldGenerator {
    world: Arc<SimulatedWorld>,
    name: String,
    flaw_probability: f64,
    correction_probability: f64,
}

impl GeneratorBackend for WorldGenerator {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        let world = &self.world;
        let parent = world.state(&request.reference);
        let text = &request.instruction.text;
        let seed = request.seed.to_le_bytes();
        let material: [&[u8]; 5] = [
            b"edit",
            self.name.as_bytes(),
            request.reference.sha256.as_bytes(),
            text.as_bytes(),
            &seed,
        ];
        let mut rng = world.rng(&material);

        let targeted: Vec<bool> = parent.flaws.iter().map(|f| text.contains(&f.id)).collect();
        let state = if targeted.iter().any(|&t| t) {
            let flaws = parent
                .flaws
                .iter()
                .zip(&targeted)
                .filter(|(_, &t)| !(t && rng.random_bool(self.correction_probability)))
                .map(|(f, _)| f.clone())
                .collect();
            ImageState {
                flaws,
                target: parent.target.clone(),
            }
        } else {
            let mut flaws = parent.flaws.clone();
            if rng.random_bool(self.flaw_probability) {
                flaws.push(Flaw {
                    id: format!("artifact-{:06x}", rng.random::<u32>() & 0x00ff_ffff),
                    recoverable: self.correction_probability > 0.0,
                });
            }
            ImageState {
                flaws,
                target: SimulatedWorld::target_summary(text),
            }
        };

        let mut payload = Sha256::new();
        for m in material {
            payload.update((m.len() as u64).to_le_bytes());
            payload.update(m);
        }
        for f in &state.flaws {
            payload.update(f.id.as_bytes());
        }
        let image = world
            .store
            .put(synth_png(&payload.finalize()))
            .map_err(|e| BackendError::MalformedBody {
                request_id: request_id(&request.fingerprint()),
                message: e.to_string(),
            })?;
        world
            .states
            .lock()
            .expect("world state poisoned")
            .insert(image.sha256.clone(), state);
        Ok(image)
    }
}

pub struct WorldReasoner {
    world: Arc<SimulatedWorld>,
    annotator: OfflineAnnotator,
}

impl WorldReasoner {
    fn result_state(&self, request: &ChatRequest) -> Result<ImageState, BackendError> {
        let image = request.images().last().ok_or_else(|| BackendError::MalformedBody {
            request_id: request_id(&request.fingerprint()),
            message: "request carries no image".into(),
        })?;
        Ok(self.world.state(image))
    }

    fn conclusion_text(state: &ImageState) -> String {
        let names = |recoverable: bool| -> Vec<&str> {
            state
                .flaws
                .iter()
                .filter(|f| f.recoverable == recoverable)
                .map(|f| f.id.as_str())
                .collect()
        };
        let fatal = names(false);
        let fixable = names(true);
        if !fatal.is_empty() {
            format!(
                "The edit left damage that cannot be repaired: {}. <#Failed>",
                fatal.join(", ")
            )
        } else if !fixable.is_empty() {
            let list = fixable.join(" and ");
            format!("The result still shows {list}. <#Reflection> Remove {list} from the image.")
        } else {
            "The result matches the target description. <#Success>".to_string()
        }
    }
}

impl ReasonerBackend for WorldReasoner {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let instruction = request
            .context
            .get("instruction")
            .cloned()
            .unwrap_or_default();
        let text = match request.label.as_str() {
            labels::THINK => instruction,
            labels::DESCRIBE => SimulatedWorld::target_summary(&instruction),
            labels::ASSESS => {
                let state = self.result_state(request)?;
                let conflicts: Vec<String> = state
                    .flaws
                    .iter()
                    .map(|f| format!("unintended {}", f.id))
                    .collect();
                let body = serde_json::json!({
                    "consistency_score": (10.0 - FLAW_PENALTY * state.flaws.len() as f64).clamp(0.0, 10.0),
                    "conflicts": conflicts,
                    "omissions": [],
                    "hallucinations": [],
                    "rationale": if state.flaws.is_empty() { "matches the target".to_string() } else { format!("{} unintended change(s)", state.flaws.len()) },
                });
                format!("```json\n{body}\n```")
            }
            labels::CONCLUDE_MULTI | labels::CONCLUDE_SINGLE | labels::CONCLUDE_DUAL => {
                Self::conclusion_text(&self.result_state(request)?)
            }
            labels::SCORE => {
                let image = request.images().last().cloned().ok_or_else(|| {
                    BackendError::MalformedBody {
                        request_id: request_id(&request.fingerprint()),
                        message: "score request carries no image".into(),
                    }
                })?;
                let q = self.world.quality(&image);
                let body = serde_json::json!({
                    "semantic_consistency": q,
                    "perceptual_quality": q,
                });
                format!("```json\n{body}\n```")
            }
            _ => return self.annotator.complete(request),
        };
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: request.text().split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::edit_image;
    use crate::types::Instruction;

    fn setup(config: WorldConfig) -> (Arc<SimulatedWorld>, ImageRef) {
        let store = Arc::new(ImageStore::in_memory());
        let reference = store.put(synth_png(b"reference")).unwrap();
        (SimulatedWorld::new(config, 7, store), reference)
    }

    #[test]
    fn deterministic_in_seed() {
        let (world, reference) = setup(WorldConfig::default());
        let g = world.generator();
        let req = EditRequest::new(reference, Instruction::concrete("Add a hat.").unwrap(), 7);
        assert_eq!(edit_image(&g, &req).unwrap(), edit_image(&g, &req).unwrap());

        let (world2, reference2) = setup(WorldConfig::default());
        let req2 = EditRequest::new(reference2, Instruction::concrete("Add a hat.").unwrap(), 7);
        assert_eq!(
            edit_image(&world2.generator(), &req2).unwrap(),
            edit_image(&g, &req).unwrap()
        );
    }

    #[test]
    fn certain_flaw_then_certain_fix() {
        let (world, reference) = setup(WorldConfig {
            flaw_probability: 1.0,
            correction_probability: 1.0,
            ..WorldConfig::default()
        });
        let g = world.generator();
        let first = g
            .edit(&EditRequest::new(reference, Instruction::concrete("Add a hat.").unwrap(), 1))
            .unwrap();
        assert_eq!(world.flaw_count(&first), 1);
        let reply = WorldReasoner::conclusion_text(&world.state(&first));
        let fix = reply.split("<#Reflection>").nth(1).unwrap().trim().to_string();
        let second = g
            .edit(&EditRequest::new(first, Instruction::concrete(fix).unwrap(), 2))
            .unwrap();
        assert_eq!(world.flaw_count(&second), 0);
    }

    #[test]
    fn zero_correction_flaws_are_fatal() {
        let (world, reference) = setup(WorldConfig::default());
        let editor = world.editor(
            "broken",
            &WorldConfig {
                flaw_probability: 1.0,
                correction_probability: 0.0,
                ..WorldConfig::default()
            },
        );
        let out = editor
            .edit(&EditRequest::new(reference, Instruction::concrete("Add a hat.").unwrap(), 1))
            .unwrap();
        assert!(WorldReasoner::conclusion_text(&world.state(&out)).ends_with("<#Failed>"));
    }

    #[test]
    fn noiseless_quality_is_base() {
        let (world, reference) = setup(WorldConfig {
            quality_noise_sd: 0.0,
            ..WorldConfig::default()
        });
        assert_eq!(world.quality(&reference), 8.0);
        assert_eq!(world.quality_of(1), 5.0);
    }

    #[test]
    fn invalid_probability_rejected() {
        let store = Arc::new(ImageStore::in_memory());
        let bad = WorldConfig {
            flaw_probability: 1.5,
            ..WorldConfig::default()
        };
        assert_eq!(
            simulated_world(bad, 0, store).err().unwrap().path,
            "flaw_probability"
        );
    }
}

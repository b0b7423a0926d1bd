//! Self-contained verification suite for the objectives, one row per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn within(name: &'static str, err: f64, tol: f64) -> Self {
        Self::new(name, err <= tol, format!("error {err:.3e}, tolerance {tol:.0e}"))
    }

    fn failed(name: &'static str, e: ObjectiveError) -> Self {
        Self::new(name, false, e.to_string())
    }
}

/// Predicts each next token of one reference sequence with probability 1.
struct Teacher<'a> {
    sequence: &'a [usize],
    vocab: usize,
}

impl TokenModel for Teacher<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, prefix: &[usize]) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab];
        p[self.sequence[prefix.len()]] = 1.0;
        p
    }
}

/// Returns the exact target velocity of whichever batch sample sits at `(x, t)`.
struct OracleField<'a>(&'a FlowBatch);

impl VectorFieldModel for OracleField<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn cond_dim(&self) -> usize {
        self.0.cond_dim()
    }

    fn evaluate(&self, x: &[f64], t: f64, _c: &[f64]) -> Vec<f64> {
        let b = self.0;
        (0..b.len())
            .find_map(|i| {
                let (xt, v) = flow_sample(&b.x0[i], &b.x1[i], b.t[i]).ok()?;
                (b.t[i] == t && xt == x).then_some(v)
            })
            .unwrap_or_else(|| vec![0.0; b.dim()])
    }
}

fn random_tokens(rng: &mut impl Rng, n: usize, len: usize, vocab: usize) -> TokenBatch {
    let seqs = (0..n).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect();
    TokenBatch::new(seqs, vocab).expect("valid batch")
}

fn toy_dataset(cond_dim: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    vec![
        (vec![1.0, -0.5], (0..cond_dim).map(|j| j as f64 * 0.5 + 0.25).collect()),
        (vec![-0.3, 2.0], (0..cond_dim).map(|j| 1.0 - j as f64 * 0.25).collect()),
    ]
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Least-squares `W` for `u = W x` over the batch, by 2×2 normal equations.
fn normal_equations_2d(batch: &FlowBatch) -> [f64; 4] {
    let (mut xx, mut vx) = ([0.0; 4], [0.0; 4]);
    for i in 0..batch.len() {
        let (x, v) = flow_sample(&batch.x0[i], &batch.x1[i], batch.t[i]).expect("validated batch");
        for r in 0..2 {
            for j in 0..2 {
                xx[r * 2 + j] += x[r] * x[j];
                vx[r * 2 + j] += v[r] * x[j];
            }
        }
    }
    let det = xx[0] * xx[3] - xx[1] * xx[2];
    let inv = [xx[3] / det, -xx[1] / det, -xx[2] / det, xx[0] / det];
    let mut w = [0.0; 4];
    for r in 0..2 {
        for j in 0..2 {
            w[r * 2 + j] = vx[r * 2] * inv[j] + vx[r * 2 + 1] * inv[2 + j];
        }
    }
    w
}

/// Run every objective check with randomness drawn from `seed`.
pub fn verify_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let uniform = TokenBatch::new(vec![vec![0, 3, 1]], 4).expect("valid batch");
    out.push(match ntp_loss(&uniform, &BigramModel::uniform(4)) {
        Ok(l) => Check::within("ntp_uniform", (l - 3.0 * 4f64.ln()).abs(), 1e-12),
        Err(e) => Check::failed("ntp_uniform", e),
    });

    let teacher = Teacher {
        sequence: &uniform.sequences[0],
        vocab: 4,
    };
    out.push(match ntp_loss(&uniform, &teacher) {
        Ok(l) => Check::new("ntp_perfect", l == 0.0, format!("loss {l}")),
        Err(e) => Check::failed("ntp_perfect", e),
    });

    let endpoints = (|| {
        let (x0, x1) = (vec![0.25, -1.5, 3.0], vec![-2.0, 0.5, 7.125]);
        let (a, va) = flow_sample(&x0, &x1, 0.0)?;
        let (b, vb) = flow_sample(&x0, &x1, 1.0)?;
        let (m, vm) = flow_sample(&[0.0], &[1.0], 0.5)?;
        let v = vec![-2.25, 2.0, 4.125];
        Ok::<_, ObjectiveError>(a == x0 && b == x1 && va == v && vb == v && m == [0.5] && vm == [1.0])
    })();
    out.push(match endpoints {
        Ok(ok) => Check::new("flow_endpoints", ok, "exact"),
        Err(e) => Check::failed("flow_endpoints", e),
    });

    let flow = FlowBatch::sample(&toy_dataset(2), 32, &mut rng).expect("valid batch");
    out.push(match flow_matching_loss(&flow, &OracleField(&flow)) {
        Ok(l) => Check::new("fm_oracle_zero", l == 0.0, format!("loss {l}")),
        Err(e) => Check::failed("fm_oracle_zero", e),
    });

    let single = FlowBatch::new(vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]], vec![0.5], vec![vec![]]).expect("valid batch");
    out.push(match flow_matching_loss(&single, &AffineField::zeros(2, 0)) {
        Ok(l) => Check::new("fm_constant_zero", l == 25.0, format!("loss {l}")),
        Err(e) => Check::failed("fm_constant_zero", e),
    });

    let ls_batch = FlowBatch::sample(&toy_dataset(0), 64, &mut rng).expect("valid batch");
    let oracle = normal_equations_2d(&ls_batch);
    let mut linear = AffineField::zeros(2, 0);
    let trace: f64 = (0..ls_batch.len())
        .map(|i| {
            let (x, _) = flow_sample(&ls_batch.x0[i], &ls_batch.x1[i], ls_batch.t[i]).expect("validated batch");
            x.iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / ls_batch.len() as f64;
    out.push(match linear.fit_weights(&ls_batch, 0.5 / trace, 500_000, 1e-13) {
        Ok(_) => {
            let err = linear.params[linear.weight_range()]
                .iter()
                .zip(oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Check::within("fm_least_squares", err, 1e-6)
        }
        Err(e) => Check::failed("fm_least_squares", e),
    });

    let tokens = random_tokens(&mut rng, 6, 5, 5);
    let bigram = BigramModel::random(5, 0.7, &mut rng);
    out.push(
        match bigram.ntp_grad(&tokens).and_then(|g| {
            grad_check(
                &bigram.logits,
                &g,
                |p| {
                    let m = BigramModel {
                        vocab: 5,
                        logits: p.to_vec(),
                    };
                    ntp_loss(&tokens, &m).unwrap_or(f64::NAN)
                },
                1e-5,
            )
        }) {
            Ok(err) => Check::within("grad_check_ntp", err, 1e-4),
            Err(e) => Check::failed("grad_check_ntp", e),
        },
    );

    let field = AffineField::random(2, 2, 0.5, &mut rng);
    out.push(
        match field.fm_grad(&flow).and_then(|g| {
            grad_check(
                &field.params,
                &g,
                |p| {
                    let mut m = field.clone();
                    m.params.copy_from_slice(p);
                    flow_matching_loss(&flow, &m).unwrap_or(f64::NAN)
                },
                1e-5,
            )
        }) {
            Ok(err) => Check::within("grad_check_fm", err, 1e-4),
            Err(e) => Check::failed("grad_check_fm", e),
        },
    );

    let model = JointModel { token: bigram, field };
    let weights = ObjectiveWeights::default();
    let linearity = (|| {
        let joint = model.grad(Stage::Unified, &tokens, &flow, weights)?;
        let mut parts = model.token.ntp_grad(&tokens)?.into_iter().map(|g| 0.1 * g).collect::<Vec<_>>();
        parts.extend(model.field.fm_grad(&flow)?);
        let grad_err = joint.iter().zip(&parts).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let fm = flow_matching_loss(&flow, &model.field)?;
        let ntp = ntp_loss(&tokens, &model.token)?;
        let loss_err = (model.loss(Stage::Unified, &tokens, &flow, weights)? - (fm + 0.1 * ntp)).abs();
        Ok::<_, ObjectiveError>(grad_err.max(loss_err))
    })();
    out.push(match linearity {
        Ok(err) => Check::within("joint_linearity", err, 1e-10),
        Err(e) => Check::failed("joint_linearity", e),
    });

    for stage in Stage::ALL {
        let name = match stage {
            Stage::Reasoning => "freeze_reasoning_stage",
            Stage::Edit => "freeze_edit_stage",
            Stage::Unified => "freeze_unified_stage",
        };
        let mut m = model.clone();
        let (tb, fb) = (bits(&m.token.logits), bits(&m.field.params));
        match m.train(stage, &tokens, &flow, weights, 0.05, 100) {
            Ok(losses) => {
                let token_same = bits(&m.token.logits) == tb;
                let field_same = bits(&m.field.params) == fb;
                let ok = token_same != stage.trains_token_model() && field_same != stage.trains_field();
                let detail = format!(
                    "token {}, field {}, loss {:.4} -> {:.4}",
                    if token_same { "frozen" } else { "updated" },
                    if field_same { "frozen" } else { "updated" },
                    losses[0],
                    losses[losses.len() - 1]
                );
                out.push(Check::new(name, ok, detail));
            }
            Err(e) => out.push(Check::failed(name, e)),
        }
    }

    out.push(expectation_check(&model.field, &mut rng));
    out
}

/// Per-sample losses of a fixed model on fresh draws: the running standard
/// error should halve each time the sample count quadruples, and every
/// running mean should agree with the final one.
fn expectation_check(field: &AffineField, rng: &mut impl Rng) -> Check {
    const NAME: &str = "fm_expectation";
    let dataset = toy_dataset(2);
    let sizes = [100usize, 400, 1600, 6400];
    let mut losses = Vec::with_capacity(sizes[3]);
    for _ in 0..sizes[3] {
        match FlowBatch::sample(&dataset, 1, rng).and_then(|b| flow_matching_loss(&b, field)) {
            Ok(l) => losses.push(l),
            Err(e) => return Check::failed(NAME, e),
        }
    }
    let stats: Vec<(f64, f64)> = sizes.iter().map(|&n| crate::scoring::mean_stderr(&losses[..n])).collect();
    let (final_mean, final_se) = stats[3];
    let ratios: Vec<f64> = stats.windows(2).map(|w| w[0].1 / w[1].1).collect();
    let ratios_ok = ratios.iter().all(|r| (1.5..=2.7).contains(r));
    let means_ok = stats.iter().all(|(m, se)| (m - final_mean).abs() <= 4.0 * (se * se + final_se * final_se).sqrt());
    Check::new(
        NAME,
        ratios_ok && means_ok,
        format!(
            "mean {final_mean:.4} ± {final_se:.4}, stderr ratios {}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join("/")
        ),
    )
}

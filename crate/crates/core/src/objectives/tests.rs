use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixed(Vec<f64>);

impl TokenModel for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }

    fn predict(&self, _prefix: &[usize]) -> Vec<f64> {
        self.0.clone()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn uniform_ntp_is_length_times_log_vocab() {
    let batch = TokenBatch::new(vec![vec![0, 1, 2]], 4).unwrap();
    let loss = ntp_loss(&batch, &BigramModel::uniform(4)).unwrap();
    assert!((loss - 4.158_883_083_359_672).abs() < 1e-12);
}

#[test]
fn ntp_is_mean_over_sequences() {
    let model = Fixed(vec![0.5, 0.25, 0.25]);
    let a = TokenBatch::new(vec![vec![0, 0]], 3).unwrap();
    let b = TokenBatch::new(vec![vec![1, 2, 1]], 3).unwrap();
    let both = TokenBatch::new(vec![vec![0, 0], vec![1, 2, 1]], 3).unwrap();
    let (la, lb) = (ntp_loss(&a, &model).unwrap(), ntp_loss(&b, &model).unwrap());
    assert!((la - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((lb - 6.0 * 2f64.ln()).abs() < 1e-12);
    assert!((ntp_loss(&both, &model).unwrap() - (la + lb) / 2.0).abs() < 1e-12);
}

#[test]
fn zero_probability_names_position() {
    let model = Fixed(vec![1.0, 0.0]);
    let batch = TokenBatch::new(vec![vec![0, 0], vec![0, 0, 1]], 2).unwrap();
    assert_eq!(
        ntp_loss(&batch, &model),
        Err(ObjectiveError::InfiniteLoss {
            sequence: 1,
            position: 2,
            token: 1
        })
    );
}

#[test]
fn token_batch_validation() {
    assert_eq!(TokenBatch::new(vec![], 3), Err(ObjectiveError::EmptyBatch));
    assert_eq!(TokenBatch::new(vec![vec![0]], 1), Err(ObjectiveError::Vocab(1)));
    assert!(matches!(
        TokenBatch::new(vec![vec![0, 3]], 3),
        Err(ObjectiveError::TokenRange { sequence: 0, position: 1, token: 3, .. })
    ));
    let batch = TokenBatch::new(vec![vec![0]], 3).unwrap();
    assert!(matches!(
        ntp_loss(&batch, &Fixed(vec![0.5, 0.6, 0.0])),
        Err(ObjectiveError::NotADistribution { .. })
    ));
    assert!(matches!(
        ntp_loss(&batch, &BigramModel::uniform(4)),
        Err(ObjectiveError::Dimension { .. })
    ));
}

#[test]
fn bigram_predicts_from_previous_token() {
    let mut m = BigramModel::uniform(2);
    // Row 1 (previous token 1) favours token 0; start row favours token 1.
    m.logits = vec![0.0, 0.0, 2f64.ln(), 0.0, 0.0, 3f64.ln()];
    let p = m.predict(&[]);
    assert!((p[1] - 0.75).abs() < 1e-15);
    let p = m.predict(&[0, 1]);
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.predict(&[1, 0]), vec![0.5, 0.5]);
}

#[test]
fn flow_sample_examples() {
    assert_eq!(flow_sample(&[0.0], &[1.0], 0.5).unwrap(), (vec![0.5], vec![1.0]));
    let (x0, x1) = ([1.5, -2.0], [0.1, 9.0]);
    assert_eq!(flow_sample(&x0, &x1, 0.0).unwrap().0, x0);
    assert_eq!(flow_sample(&x0, &x1, 1.0).unwrap().0, x1);
    assert_eq!(flow_sample(&x0, &x1, 1.5), Err(ObjectiveError::TimeRange(1.5)));
    assert!(flow_sample(&x0, &x1, f64::NAN).is_err());
    assert!(matches!(flow_sample(&x0, &[1.0], 0.5), Err(ObjectiveError::Dimension { .. })));
}

#[test]
fn constant_zero_field_on_single_sample() {
    let batch = FlowBatch::new(vec![vec![0.0, 0.0]], vec![vec![3.0, 4.0]], vec![0.3], vec![vec![]]).unwrap();
    assert_eq!(flow_matching_loss(&batch, &AffineField::zeros(2, 0)).unwrap(), 25.0);
}

#[test]
fn flow_batch_validation() {
    assert_eq!(FlowBatch::new(vec![], vec![], vec![], vec![]), Err(ObjectiveError::EmptyBatch));
    assert!(FlowBatch::new(vec![vec![0.0]], vec![vec![0.0, 1.0]], vec![0.1], vec![vec![]]).is_err());
    assert_eq!(
        FlowBatch::new(vec![vec![0.0]], vec![vec![1.0]], vec![-0.1], vec![vec![]]),
        Err(ObjectiveError::TimeRange(-0.1))
    );
    let batch = FlowBatch::new(vec![vec![0.0]], vec![vec![1.0]], vec![0.1], vec![vec![2.0]]).unwrap();
    assert!(matches!(
        flow_matching_loss(&batch, &AffineField::zeros(2, 1)),
        Err(ObjectiveError::Dimension { .. })
    ));
    assert!(AffineField::zeros(1, 0).fm_grad(&batch).is_err());
}

#[test]
fn affine_field_layout() {
    let mut f = AffineField::zeros(2, 1);
    // W = [[1, 2], [3, 4]], a = [5, 6], B = [[7], [8]], b = [9, 10]
    f.params = (1..=10).map(f64::from).collect();
    assert_eq!(f.evaluate(&[1.0, -1.0], 0.5, &[2.0]), vec![-1.0 + 2.5 + 14.0 + 9.0, -1.0 + 3.0 + 16.0 + 10.0]);
}

#[test]
fn joint_loss_examples() {
    let w = ObjectiveWeights::default();
    assert_eq!(joint_loss(2.0, 5.0, w), 2.5);
    assert_eq!(joint_loss(3.25, 7.0, ObjectiveWeights::new(0.0).unwrap()), 3.25);
    assert_eq!(joint_loss(0.0, 0.0, ObjectiveWeights::new(4.0).unwrap()), 0.0);
    assert!(ObjectiveWeights::new(-0.1).is_err());
    assert!(ObjectiveWeights::new(f64::INFINITY).is_err());
}

#[test]
fn grad_check_flags_non_finite_gradients() {
    let err = grad_check(&[1.0, 2.0], &[2.0, f64::NAN], |p| p[0] * p[0] + p[1], 1e-5);
    assert_eq!(err, Err(ObjectiveError::NonFiniteGradient { index: 1 }));
    let err = grad_check(&[1.0, 1e-6], &[2.0, 1e6], |p| p[0] * p[0] + p[1].ln(), 1e-5);
    assert_eq!(err, Err(ObjectiveError::NonFiniteGradient { index: 1 }));
}

#[test]
fn grad_check_detects_wrong_gradient() {
    let err = grad_check(&[1.0, 2.0], &[2.0, 1.0], |p| p[0] * p[0] + 2.0 * p[1], 1e-5).unwrap();
    assert!(err > 0.4);
}

/// Independent 2×2 least-squares oracle via Cramer's rule per output row.
fn cramer_oracle(batch: &FlowBatch) -> [f64; 4] {
    let mut s = [[0.0; 2]; 2];
    let mut r = [[0.0; 2]; 2];
    for i in 0..batch.len() {
        let t = batch.t[i];
        let x: Vec<f64> = (0..2).map(|j| (1.0 - t) * batch.x0[i][j] + t * batch.x1[i][j]).collect();
        let v: Vec<f64> = (0..2).map(|j| batch.x1[i][j] - batch.x0[i][j]).collect();
        for a in 0..2 {
            for b in 0..2 {
                s[a][b] += x[a] * x[b];
                r[a][b] += v[a] * x[b];
            }
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let mut w = [0.0; 4];
    for row in 0..2 {
        w[row * 2] = (r[row][0] * s[1][1] - r[row][1] * s[1][0]) / det;
        w[row * 2 + 1] = (s[0][0] * r[row][1] - s[0][1] * r[row][0]) / det;
    }
    w
}

#[test]
fn fitted_linear_field_matches_least_squares() {
    let dataset = vec![(vec![2.0, 0.5], vec![]), (vec![-1.0, 1.5], vec![])];
    let batch = FlowBatch::sample(&dataset, 48, &mut rng(3)).unwrap();
    let mut field = AffineField::zeros(2, 0);
    field.fit_weights(&batch, 0.05, 500_000, 1e-13).unwrap();
    for (a, b) in field.params[field.weight_range()].iter().zip(cramer_oracle(&batch)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(field.params[4..].iter().all(|p| *p == 0.0));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(11);
    let tokens = TokenBatch::new(vec![vec![0, 2, 2, 1], vec![3, 0], vec![1, 1, 1]], 4).unwrap();
    let model = BigramModel::random(4, 1.0, &mut r);
    let g = model.ntp_grad(&tokens).unwrap();
    let err = grad_check(
        &model.logits,
        &g,
        |p| {
            let mut m = model.clone();
            m.logits.copy_from_slice(p);
            ntp_loss(&tokens, &m).unwrap()
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    let dataset = vec![(vec![0.5, 1.0, -1.0], vec![1.0, 0.0]), (vec![2.0, 0.0, 0.5], vec![0.0, 1.0])];
    let flow = FlowBatch::sample(&dataset, 20, &mut r).unwrap();
    let field = AffineField::random(3, 2, 0.4, &mut r);
    let g = field.fm_grad(&flow).unwrap();
    let err = grad_check(
        &field.params,
        &g,
        |p| {
            let mut m = field.clone();
            m.params.copy_from_slice(p);
            flow_matching_loss(&flow, &m).unwrap()
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

fn joint_fixture(seed: u64) -> (JointModel, TokenBatch, FlowBatch) {
    let mut r = rng(seed);
    let tokens = TokenBatch::new(vec![vec![0, 1, 2, 1, 0], vec![2, 2, 0, 1]], 3).unwrap();
    let dataset = vec![(vec![1.0, -1.0], vec![0.5]), (vec![0.0, 2.0], vec![-0.5])];
    let flow = FlowBatch::sample(&dataset, 16, &mut r).unwrap();
    let model = JointModel {
        token: BigramModel::random(3, 0.5, &mut r),
        field: AffineField::random(2, 1, 0.5, &mut r),
    };
    (model, tokens, flow)
}

#[test]
fn joint_gradient_is_weighted_sum() {
    let (model, tokens, flow) = joint_fixture(5);
    let w = ObjectiveWeights::default();
    let joint = model.grad(Stage::Unified, &tokens, &flow, w).unwrap();
    let ntp = model.token.ntp_grad(&tokens).unwrap();
    let fm = model.field.fm_grad(&flow).unwrap();
    let expected: Vec<f64> = ntp.iter().map(|g| 0.1 * g).chain(fm).collect();
    for (a, b) in joint.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-10);
    }
    let err = grad_check(
        &model.params(),
        &joint,
        |p| {
            let mut m = model.clone();
            m.set_params(p).unwrap();
            m.loss(Stage::Unified, &tokens, &flow, w).unwrap()
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn stages_freeze_the_other_component() {
    let (model, tokens, flow) = joint_fixture(9);
    let w = ObjectiveWeights::default();
    for stage in Stage::ALL {
        let mut m = model.clone();
        let losses = m.train(stage, &tokens, &flow, w, 0.05, 100).unwrap();
        assert_eq!(losses.len(), 101);
        assert!(losses[100] < losses[0], "{stage:?} did not descend");
        let token_same = m.token.logits.iter().zip(&model.token.logits).all(|(a, b)| a.to_bits() == b.to_bits());
        let field_same = m.field.params.iter().zip(&model.field.params).all(|(a, b)| a.to_bits() == b.to_bits());
        assert_eq!(token_same, !stage.trains_token_model(), "{stage:?}");
        assert_eq!(field_same, !stage.trains_field(), "{stage:?}");
    }
}

#[test]
fn verify_suite_passes() {
    let rows = verify_suite(0);
    assert_eq!(rows.len(), 13);
    for row in rows {
        assert!(row.passed, "{}: {}", row.name, row.detail);
    }
}

proptest! {
    #[test]
    fn ntp_is_non_negative_and_zero_only_when_certain(
        seqs in prop::collection::vec(prop::collection::vec(0usize..4, 1..6), 1..4),
        seed in any::<u64>(),
    ) {
        let batch = TokenBatch::new(seqs, 4).unwrap();
        let model = BigramModel::random(4, 1.0, &mut rng(seed));
        prop_assert!(ntp_loss(&batch, &model).unwrap() > 0.0);
    }

    #[test]
    fn fm_loss_is_non_negative(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let dataset = vec![(vec![1.0, 0.0], vec![1.0]), (vec![0.0, 1.0], vec![-1.0])];
        let batch = FlowBatch::sample(&dataset, n, &mut r).unwrap();
        let field = AffineField::random(2, 1, 1.0, &mut r);
        prop_assert!(flow_matching_loss(&batch, &field).unwrap() >= 0.0);
    }

    #[test]
    fn flow_sample_stays_on_segment(
        pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..5),
        t in 0.0f64..=1.0,
    ) {
        let (x0, x1): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let (xt, v) = flow_sample(&x0, &x1, t).unwrap();
        for j in 0..x0.len() {
            prop_assert!(xt[j] >= x0[j].min(x1[j]) - 1e-9 && xt[j] <= x0[j].max(x1[j]) + 1e-9);
            prop_assert_eq!(v[j], x1[j] - x0[j]);
        }
    }

    #[test]
    fn joint_loss_is_linear(fm in 0.0f64..100.0, ntp in 0.0f64..100.0, w in 0.0f64..10.0) {
        let weights = ObjectiveWeights::new(w).unwrap();
        prop_assert_eq!(joint_loss(fm, 0.0, weights), fm);
        prop_assert!((joint_loss(fm, ntp, weights) - fm - w * ntp).abs() <= 1e-10);
    }

    #[test]
    fn bigram_predictions_are_distributions(seed in any::<u64>(), prefix in prop::collection::vec(0usize..5, 0..4)) {
        let model = BigramModel::random(5, 3.0, &mut rng(seed));
        let p = model.predict(&prefix);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x > 0.0));
    }
}

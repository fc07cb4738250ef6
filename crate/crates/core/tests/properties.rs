use proptest::prelude::*;

use divr::eval::{ade, evaluate, fde};
use divr::ingest::{build_samples, Sample, SplitKind};
use divr::model::ecc::{ContextEncoder, GraphTyping};
use divr::model::params::Init;
use divr::model::{DivrModel, EncodedFrame, EncodedGraph, Matrix, ModelConfig, ParamStore, Tape, Variant};
use divr::scenegraph::{NodeType, EDGE_FEATURES, NODE_FEATURES};
use divr::synthdata::{generate_corpus, DEFAULT_SCENARIOS};
use divr::training::{adam_step, batch_gradients, loss_total, sample_gradients, AdamState, LossBreakdown, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn traj(rows: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-20.0f64..20.0, rows * 2).prop_map(move |d| Matrix::from_vec(rows, 2, d).unwrap())
}

fn samples(n: usize) -> Vec<Sample> {
    let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[1..2], 12).unwrap();
    build_samples(&sessions[0], 1, 48).unwrap().into_iter().take(n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn displacement_metrics_are_symmetric_metrics(p in traj(10), g in traj(10), q in traj(10)) {
        let (a, b) = (ade(&p, &g).unwrap(), fde(&p, &g).unwrap());
        prop_assert!(a >= 0.0 && b >= 0.0);
        prop_assert_eq!(a, ade(&g, &p).unwrap());
        prop_assert_eq!(b, fde(&g, &p).unwrap());
        prop_assert!(a <= ade(&p, &q).unwrap() + ade(&q, &g).unwrap() + 1e-12);
        prop_assert!(b <= fde(&p, &q).unwrap() + fde(&q, &g).unwrap() + 1e-12);
    }

    #[test]
    fn total_loss_dominates_its_terms(p in traj(10), r in traj(6), gf in traj(10), gp in traj(6)) {
        let l = loss_total(&p, &r, &gf, &gp).unwrap();
        prop_assert!(l.trans >= 0.0 && l.rec >= 0.0 && l.des >= 0.0);
        prop_assert!(l.total >= l.trans.max(l.rec).max(l.des));
    }

    #[test]
    fn vanishing_learning_rate_freezes_parameters(g in prop::collection::vec(-100.0f64..100.0, 6), wd in 0.0f64..0.1) {
        let mut params = ParamStore::new();
        params.add("a", Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        params.add("b", Matrix::from_vec(1, 2, vec![3.0, -0.25]).unwrap());
        let before = params.clone();
        let grads = [Matrix::from_vec(2, 2, g[..4].to_vec()).unwrap(), Matrix::from_vec(1, 2, g[4..].to_vec()).unwrap()];
        let cfg = TrainConfig { lr: 1e-300, weight_decay: wd, ..TrainConfig::default() };
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg, 0).unwrap();
        for ((_, _, a), (_, _, b)) in params.iter().zip(before.iter()) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }
}

#[test]
fn batch_loss_is_the_mean_of_sample_losses() {
    let set = samples(5);
    let model = DivrModel::new(ModelConfig::tiny(), Variant::DivrHet, 2).unwrap();
    let refs: Vec<&Sample> = set.iter().collect();
    let (batch_loss, batch_grads) = batch_gradients(&model, &refs).unwrap();
    let per: Vec<(LossBreakdown, Vec<Matrix>)> = set.iter().map(|s| sample_gradients(&model, s).unwrap()).collect();
    let mean = LossBreakdown::mean(&per.iter().map(|p| p.0).collect::<Vec<_>>());
    assert!((batch_loss.total - mean.total).abs() < 1e-12);
    assert!((batch_loss.des - mean.des).abs() < 1e-12);
    for (i, g) in batch_grads.iter().enumerate() {
        let mut acc = Matrix::zeros(g.rows, g.cols);
        for p in &per {
            acc.add_assign(&p.1[i]);
        }
        assert!(g.max_abs_diff(&acc.scale(1.0 / per.len() as f64)) < 1e-12);
    }
}

#[test]
fn evaluation_ignores_window_order() {
    let set = samples(9);
    let model = DivrModel::new(ModelConfig::tiny(), Variant::MotionGaze, 4).unwrap();
    let base = evaluate(&model, &set, SplitKind::Random).unwrap();
    let mut rotated = set.clone();
    rotated.rotate_left(4);
    assert_eq!(evaluate(&model, &rotated, SplitKind::Random).unwrap(), base);
}

#[test]
fn oracle_and_constant_predictors() {
    let set = samples(6);
    for s in &set {
        assert_eq!(ade(&s.future, &s.future).unwrap(), 0.0);
        assert_eq!(fde(&s.future, &s.future).unwrap(), 0.0);
    }
    // a pedestrian who keeps moving is never matched by standing still
    let moving = set.iter().find(|s| s.future.row(0) != s.future.row(9)).expect("a moving window");
    let last = moving.window.last_observed();
    let still = Matrix::from_rows(&[[last.x, last.y]; 10]);
    assert!(ade(&still, &moving.future).unwrap() > 0.0);
}

fn frame(types: Vec<NodeType>, features: Matrix, edges: Vec<(usize, usize)>, edge_features: Matrix) -> EncodedFrame {
    EncodedFrame { node_types: types, node_features: features, edges, edge_features }
}

fn context_encoder(store: &mut ParamStore, typing: GraphTyping) -> ContextEncoder {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut init = Init { store, rng: &mut rng };
    ContextEncoder::new(&mut init, "c", typing, cfg.gcn_hidden, 6, cfg.latent_dim, cfg.n_latents)
}

#[test]
fn identical_isolated_nodes_pool_to_one_node() {
    // without edges every node embeds independently, so the mean pool of
    // identical nodes equals the embedding of one of them
    let mut store = ParamStore::new();
    let enc = context_encoder(&mut store, GraphTyping::Homogeneous);
    let row: Vec<f64> = (0..NODE_FEATURES).map(|i| 0.1 * i as f64 - 0.5).collect();
    let one = frame(vec![NodeType::Vehicle], Matrix::from_rows(std::slice::from_ref(&row)), vec![], Matrix::zeros(0, EDGE_FEATURES));
    let many = frame(vec![NodeType::Vehicle; 4], Matrix::from_rows(&vec![row; 4]), vec![], Matrix::zeros(0, EDGE_FEATURES));
    let mut t = Tape::with_params(&store);
    let a = enc.frame_embedding(&mut t, &one).unwrap();
    let b = enc.frame_embedding(&mut t, &many).unwrap();
    assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
}

#[test]
fn zeroed_graph_reduces_to_the_bias_path() {
    // with zero features and the freshly initialized zero biases every
    // message vanishes, so only the root path's biases remain and the node
    // count and edge structure stop mattering
    let mut store = ParamStore::new();
    let enc = context_encoder(&mut store, GraphTyping::Heterogeneous);
    let dense = EncodedGraph {
        frames: (0..6)
            .map(|k| {
                let n = 3 + k % 3;
                frame(
                    vec![NodeType::Location; n],
                    Matrix::filled(n, NODE_FEATURES, 0.7),
                    vec![(0, 1), (1, 2), (2, 0)],
                    Matrix::filled(3, EDGE_FEATURES, -0.3),
                )
            })
            .collect(),
    }
    .zeroed();
    let sparse = EncodedGraph {
        frames: (0..6)
            .map(|_| frame(vec![NodeType::Location], Matrix::zeros(1, NODE_FEATURES), vec![], Matrix::zeros(0, EDGE_FEATURES)))
            .collect(),
    };
    let mut t = Tape::with_params(&store);
    let a = enc.encode(&mut t, &dense).unwrap();
    let b = enc.encode(&mut t, &sparse).unwrap();
    assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
}

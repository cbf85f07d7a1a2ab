//! Deterministic fixtures shared by the criterion benches: a default-size
//! sixteen-device setup with randomly initialized weights. Random weights
//! keep fixture construction fast; the arithmetic cost per call is the same
//! as with trained ones.

use edgefuse_core::backbone::default_layer_widths;
use edgefuse_core::pipeline::PipelineCfg;
use edgefuse_core::scenario::{self, RoundState};
use edgefuse_core::{CommModules, ErasureChannel, Mode, ScenarioCfg, SplitModel, TrainCfg};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub scen: ScenarioCfg,
    pub cfg: PipelineCfg,
    pub model: SplitModel,
    pub modules: CommModules,
    pub state: RoundState,
}

/// Default geometry (16 devices, 32x32 images, split 2) with a small
/// generated dataset backing one pre-built inference round.
pub fn fixture() -> Fixture {
    let scen = ScenarioCfg {
        train_samples: 64,
        val_samples: 64,
        test_samples: 256,
        ..ScenarioCfg::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = scenario::gen_dataset(&scen, &mut rng).expect("dataset");

    let split = 2;
    let widths = default_layer_widths(scen.input_dim(), scen.n_classes);
    let model = SplitModel::new(&widths, split, &mut rng).expect("model");
    let modules = CommModules::init(model.feature_dim_at(split).expect("dim"), &mut rng);

    let cfg = PipelineCfg {
        split,
        data: ErasureChannel::new(0.1, 40, 0.0).expect("channel"),
        query: ErasureChannel::new(0.0, 40, 0.0).expect("channel"),
        rho: 0.01,
        mode: Mode::Semantic,
        train: TrainCfg::default(),
    };
    let state = scenario::build_round(&scen, &ds.test, &mut rng).expect("round");

    Fixture {
        scen,
        cfg,
        model,
        modules,
        state,
    }
}

/// A row-stochastic-shaped random score matrix input for the matching
/// benches (raw scores, not yet normalized).
pub fn random_scores(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, n), |_| rng.gen_range(-3.0..3.0))
}

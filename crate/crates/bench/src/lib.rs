//! Fixtures shared by the benchmarks: a small prepared synthetic table and a
//! briefly trained surrogate.

use tabattack::consistency::{fit_supports, Supports};
use tabattack::embedding::TripletConfig;
use tabattack::pipeline::{prepare, train_surrogate, Prepared};
use tabattack::preprocess::{PreprocessConfig, SplitSpec};
use tabattack::surrogate::{SolverConfig, SurrogateModel};
use tabattack::synth::{synth_generate, SynthSpec};

pub struct Fixture {
    pub prepared: Prepared,
    pub surrogate: SurrogateModel,
    pub supports: Supports,
}

/// `n` reference-preset rows, 64 of them held out for attacks.
pub fn fixture(n: usize) -> Fixture {
    let spec = SynthSpec {
        n_samples: n,
        ..SynthSpec::reference(0)
    };
    let out = synth_generate(&spec).expect("synth");
    let split = SplitSpec {
        attack_set_size: 64,
        ..SplitSpec::default()
    };
    let prepared = prepare(&out.table, &out.schema, &PreprocessConfig::default(), &split).expect("prepare");
    let triplet = TripletConfig {
        epochs: 10,
        ..TripletConfig::default()
    };
    let solver = SolverConfig {
        epochs: 20,
        ..SolverConfig::default()
    };
    let surrogate = train_surrogate(&prepared, &triplet, 4, &solver).expect("surrogate");
    let supports = fit_supports(&prepared.all().expect("splits")).expect("supports");
    Fixture {
        prepared,
        surrogate,
        supports,
    }
}

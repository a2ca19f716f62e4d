use nalgebra::DVector;
use zofed_core::engine::bilevel::{minimax_adapter, run_bilevel, LowerConfig};
use zofed_core::engine::nn::run_single_level;
use zofed_core::engine::{InitialPoint, RunConfig};
use zofed_core::problems::dataset::{iid_partition, synth_gaussian_blobs};
use zofed_core::problems::fair::FairMinimax;
use zofed_core::problems::logistic::LogisticHyper;
use zofed_core::problems::relu::ReluShape;
use zofed_core::problems::synthetic::{ClientObjective, ClosureObjective};
use zofed_core::problems::toy::{toy_bilevel_implicit, ToyBilevel};
use zofed_core::{stream_rng, ConvexSet, Stream};

fn quad(dim: usize, clients: usize) -> ClosureObjective<impl Fn(&DVector<f64>) -> f64 + Sync> {
    let set = ConvexSet::uniform_box(dim, -2.0, 2.0).unwrap();
    ClosureObjective::new(dim, clients, set, |x: &DVector<f64>| 0.5 * x.norm_squared() + x.iter().map(|t| t.abs()).sum::<f64>())
}

#[test]
fn recorded_iterates_follow_the_log() {
    let p = quad(3, 2);
    let mut rc = RunConfig::new(2, 0.05, 0.1, 3, 12, 5);
    rc.record_iterates = true;
    let t = run_single_level(&p, &rc).unwrap();
    assert_eq!(t.iterates.len(), t.records.len());
    assert_eq!(t.iterates.last().unwrap(), &t.x_final);

    rc.record_iterates = false;
    let u = run_single_level(&p, &rc).unwrap();
    assert!(u.iterates.is_empty());
    assert_eq!(u.records, t.records);
}

#[test]
fn one_client_rounds_collapse_to_serial_steps() {
    let p = quad(4, 1);
    let mut a = RunConfig::new(1, 0.03, 0.05, 4, 6, 11);
    a.residual_every = 0;
    a.record_iterates = true;
    let mut b = a.clone();
    b.local_steps = 1;
    b.rounds = 24;
    let ta = run_single_level(&p, &a).unwrap();
    let tb = run_single_level(&p, &b).unwrap();
    for (r, x) in ta.iterates.iter().enumerate() {
        assert_eq!(x, &tb.iterates[4 * r], "round {r}");
    }
}

#[test]
fn clients_draw_independent_directions() {
    let set = ConvexSet::uniform_box(5, -1.0, 1.0).unwrap();
    let p = ClientObjective::new(5, 3, 1, set, |x: &DVector<f64>, _, _| Ok(x.iter().map(|t| t * t * t).sum()));
    let mut rc = RunConfig::new(3, 0.1, 0.1, 1, 1, 3).with_init(InitialPoint::Given(DVector::from_element(5, 0.3)));
    rc.residual_every = 0;
    let t = run_single_level(&p, &rc).unwrap();
    assert!(t.records[1].consensus_error > 0.0);
}

#[test]
fn toy_bilevel_tracks_the_implicit_objective() {
    let p = ToyBilevel::new(3, 2, 2.0).unwrap();
    let mut rc = RunConfig::new(2, 0.02, 0.05, 2, 60, 21);
    rc.residual_every = 0;
    let lower = LowerConfig { exact: true, ..Default::default() };
    let t = run_bilevel(&p, &rc, &lower).unwrap();
    let last = t.records.last().unwrap();
    assert!((last.loss - toy_bilevel_implicit(&t.x_final)).abs() < 1e-12);
    assert!(last.loss <= t.records[0].loss + 1e-12);
}

#[test]
fn fair_minimax_runs_through_the_adapter() {
    let mut rng = stream_rng(9, Stream::Init);
    let data = synth_gaussian_blobs(60, 2, &mut rng).unwrap();
    let parts = iid_partition(&data, 2, &mut rng).unwrap();
    let shape = ReluShape { hidden: 2, inputs: 2 };
    let set = ConvexSet::uniform_box(shape.num_params(), -1.0, 1.0).unwrap();
    let fair = FairMinimax::new(shape, 0.1, parts, set).unwrap();
    let p = minimax_adapter(fair).unwrap();
    let mut rc = RunConfig::new(2, 0.01, 0.05, 2, 4, 2);
    rc.residual_every = 0;
    let t = run_bilevel(&p, &rc, &LowerConfig::default()).unwrap();
    assert_eq!(t.records.len(), 5);
    assert!(t.records.iter().all(|r| r.loss.is_finite()));
    assert_eq!(t.counters.lower_calls, 2 * 4);
}

#[test]
fn logistic_weights_stay_in_their_box() {
    let mut rng = stream_rng(4, Stream::Init);
    let data = synth_gaussian_blobs(120, 3, &mut rng).unwrap();
    let parts = iid_partition(&data, 4, &mut rng).unwrap();
    let (train, val): (Vec<_>, Vec<_>) = parts.iter().map(|d| d.split(0.7, &mut rng).unwrap()).unzip();
    let p = LogisticHyper::new(train, val, None, 0.1, 2.0).unwrap();
    let mut rc = RunConfig::new(4, 0.5, 0.1, 2, 5, 8).with_init(InitialPoint::Given(DVector::from_element(4, 1.0)));
    rc.residual_every = 0;
    let t = run_bilevel(&p, &rc, &LowerConfig::default()).unwrap();
    assert!(t.x_final.iter().all(|&w| (0.1..=2.0).contains(&w)));
    assert!(t.records.iter().all(|r| r.loss.is_finite()));
}

//! Builds problem instances from configuration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use zofed_core::engine::bilevel::minimax_adapter;
use zofed_core::problems::cournot::{CournotConfig, CournotGame};
use zofed_core::problems::dataset::{
    dirichlet_partition, iid_partition, load_csv_dataset, synth_gaussian_blobs, LabelRule, LocalDataset,
};
use zofed_core::problems::fair::FairMinimax;
use zofed_core::problems::logistic::LogisticHyper;
use zofed_core::problems::relu::{ReluRegression, ReluShape};
use zofed_core::problems::synthetic::QuadraticBilevel;
use zofed_core::problems::toy::ToyBilevel;
use zofed_core::{stream_rng, ConvexSet, ProblemInstance, Stream, StreamRng};

use crate::config::{DataSource, PartitionRule, ProblemConfig, SetSpec};
use crate::error::HarnessError;

pub fn build_set(spec: &SetSpec, dim: usize) -> Result<ConvexSet, HarnessError> {
    Ok(match spec {
        SetSpec::Whole => ConvexSet::Whole,
        SetSpec::Nonneg => ConvexSet::Nonneg,
        SetSpec::Box { lo, hi } => ConvexSet::uniform_box(dim, *lo, *hi)?,
        SetSpec::Ball { radius } => ConvexSet::ball(DVector::zeros(dim), *radius)?,
    })
}

fn load(source: &DataSource, rng: &mut StreamRng) -> Result<LocalDataset, HarnessError> {
    match source {
        DataSource::Synthetic { samples, features } => Ok(synth_gaussian_blobs(*samples, *features, rng)?),
        DataSource::Csv {
            path,
            label_column,
            positive_label,
        } => {
            let rule = match positive_label {
                Some(p) => LabelRule::Positive(p.clone()),
                None => LabelRule::Binary,
            };
            let (ds, mapping) = load_csv_dataset(path, label_column, &rule)?;
            log::info!("loaded {} rows from {}; label mapping {:?}", ds.len(), path.display(), mapping);
            Ok(ds)
        }
    }
}

fn partition(ds: &LocalDataset, m: usize, rule: &PartitionRule, rng: &mut StreamRng) -> Result<Vec<LocalDataset>, HarnessError> {
    Ok(match rule {
        PartitionRule::Iid => iid_partition(ds, m, rng)?,
        PartitionRule::Dirichlet { alpha } => dirichlet_partition(ds, m, *alpha, rng)?,
    })
}

/// Instantiates the problem; all randomness comes from `seed`.
pub fn build_problem(cfg: &ProblemConfig, seed: u64) -> Result<ProblemInstance, HarnessError> {
    let mut rng = stream_rng(seed, Stream::Init);
    Ok(match cfg {
        ProblemConfig::ReluRegression {
            clients,
            data,
            partition: rule,
            hidden,
            lambda,
            constraint,
        } => {
            let ds = load(data, &mut rng)?;
            let shape = ReluShape {
                hidden: *hidden,
                inputs: ds.n_features(),
            };
            let parts = partition(&ds, *clients, rule, &mut rng)?;
            let set = build_set(constraint, shape.num_params())?;
            ProblemInstance::SingleLevel(Box::new(ReluRegression::new(shape, *lambda, parts, set)?))
        }
        ProblemConfig::LogisticHyper {
            clients,
            data,
            partition: rule,
            validation_fraction,
            test_fraction,
            reg_floor,
            reg_ceiling,
        } => {
            let ds = load(data, &mut rng)?;
            let (test, pool) = match test_fraction {
                Some(f) => {
                    let (t, rest) = ds.split(*f, &mut rng)?;
                    (Some(t), rest)
                }
                None => (None, ds),
            };
            let parts = partition(&pool, *clients, rule, &mut rng)?;
            let mut train = Vec::with_capacity(parts.len());
            let mut validation = Vec::with_capacity(parts.len());
            for (i, p) in parts.iter().enumerate() {
                if p.len() < 2 {
                    return Err(HarnessError::Config(format!(
                        "client {i} holds {} row(s); a train/validation split needs at least 2",
                        p.len()
                    )));
                }
                let (v, t) = p.split(*validation_fraction, &mut rng)?;
                validation.push(v);
                train.push(t);
            }
            ProblemInstance::Bilevel(Box::new(LogisticHyper::new(train, validation, test, *reg_floor, *reg_ceiling)?))
        }
        ProblemConfig::FairMinimax {
            clients,
            data,
            partition: rule,
            hidden,
            lambda,
            constraint,
        } => {
            let ds = load(data, &mut rng)?;
            let shape = ReluShape {
                hidden: *hidden,
                inputs: ds.n_features(),
            };
            let parts = partition(&ds, *clients, rule, &mut rng)?;
            let set = build_set(constraint, shape.num_params())?;
            let fair = FairMinimax::new(shape, *lambda, parts, set)?;
            ProblemInstance::Minimax(Box::new(minimax_adapter(fair)?))
        }
        ProblemConfig::ToyBilevel { dim, clients, half_width } => {
            ProblemInstance::Bilevel(Box::new(ToyBilevel::new(*dim, *clients, *half_width)?))
        }
        ProblemConfig::QuadraticBilevel {
            clients,
            upper_dim,
            lower_dim,
            noise,
        } => {
            let maps = (0..*clients)
                .map(|_| DMatrix::from_fn(*lower_dim, *upper_dim, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let target = DVector::from_fn(*lower_dim, |_, _| rng.random_range(-1.0..1.0));
            ProblemInstance::Bilevel(Box::new(QuadraticBilevel::new(maps, target, *noise)?))
        }
        ProblemConfig::Cournot {
            clients,
            followers,
            b,
            samples_per_client,
        } => {
            let game_cfg = CournotConfig::sample(*followers, *b, &mut rng)?;
            ProblemInstance::TwoStage(Box::new(CournotGame::sample(game_cfg, *clients, *samples_per_client, &mut rng)?))
        }
    })
}

//! Synthetic trip generator for offline runs.
//!
//! Two profiles:
//! * `Marginal` draws every field independently from the survey marginals
//!   (mode shares 44.6/36.2/13.3/5.8%). No feature carries signal.
//! * `Separable` assigns the mode by [`separable_rule`] and makes every other
//!   field a function of the mode, so any reasonable nearest-neighbour method
//!   reaches (near) 100% accuracy. Acceptance runs need that known ceiling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{
    quantize_minutes, quantize_tenths, AgeBand, DataError, Dataset, Education, Gender, IncomeBand,
    TripMode, TripPurpose, TripRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Marginal,
    Separable,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "marginal" => Ok(Profile::Marginal),
            "separable" => Ok(Profile::Separable),
            other => Err(format!("unknown profile {other:?}")),
        }
    }
}

/// Mode assignment of the separable profile.
pub fn separable_rule(distance_miles: f64, vehicles: f64) -> TripMode {
    if distance_miles < 0.8 {
        TripMode::Walk
    } else if vehicles >= 1.0 {
        TripMode::Drive
    } else if distance_miles > 3.0 {
        TripMode::Transit
    } else {
        TripMode::BikeMicromobility
    }
}

struct Archetype {
    age: AgeBand,
    gender: Gender,
    education: Education,
    income: IncomeBand,
    purpose: TripPurpose,
    /// First hour of a two-hour departure window.
    window_start: u32,
    /// Inclusive range of distances in tenths of a mile.
    distance_tenths: (u32, u32),
    vehicles: &'static [u32],
}

fn archetype(mode: TripMode) -> Archetype {
    match mode {
        TripMode::Drive => Archetype {
            age: AgeBand::Age35To44,
            gender: Gender::Male,
            education: Education::Bachelor,
            income: IncomeBand::From100kTo200k,
            purpose: TripPurpose::Work,
            window_start: 7,
            distance_tenths: (8, 40),
            vehicles: &[1, 2],
        },
        TripMode::Walk => Archetype {
            age: AgeBand::Age25To34,
            gender: Gender::Female,
            education: Education::Graduate,
            income: IncomeBand::From50kTo75k,
            purpose: TripPurpose::Meal,
            window_start: 11,
            distance_tenths: (1, 7),
            vehicles: &[0, 1],
        },
        TripMode::Transit => Archetype {
            age: AgeBand::Age18To24,
            gender: Gender::NonBinary,
            education: Education::SomeCollege,
            income: IncomeBand::From25kTo50k,
            purpose: TripPurpose::School,
            window_start: 16,
            distance_tenths: (31, 60),
            vehicles: &[0],
        },
        TripMode::BikeMicromobility => Archetype {
            age: AgeBand::Age45To54,
            gender: Gender::Male,
            education: Education::Associates,
            income: IncomeBand::From75kTo100k,
            purpose: TripPurpose::SocialRecreation,
            window_start: 19,
            distance_tenths: (8, 30),
            vehicles: &[0],
        },
    }
}

fn weighted<T: Copy>(all: &[T], count: impl Fn(T) -> u32) -> (Vec<T>, WeightedIndex<u32>) {
    let w = WeightedIndex::new(all.iter().map(|&v| count(v))).expect("positive weights");
    (all.to_vec(), w)
}

struct Marginals {
    mode: (Vec<TripMode>, WeightedIndex<u32>),
    age: (Vec<AgeBand>, WeightedIndex<u32>),
    gender: (Vec<Gender>, WeightedIndex<u32>),
    education: (Vec<Education>, WeightedIndex<u32>),
    income: (Vec<IncomeBand>, WeightedIndex<u32>),
    purpose: (Vec<TripPurpose>, WeightedIndex<u32>),
    vehicles: WeightedIndex<u32>,
    distance: LogNormal<f64>,
    start: Normal<f64>,
}

fn pick<T: Copy, R: Rng>(rng: &mut R, (values, w): &(Vec<T>, WeightedIndex<u32>)) -> T {
    values[w.sample(rng)]
}

impl Marginals {
    fn new() -> Self {
        // log-normal matching mean 2.28, SD 2.33
        let sigma2 = (1.0 + (2.33f64 / 2.28).powi(2)).ln();
        let mu = 2.28f64.ln() - sigma2 / 2.0;
        Marginals {
            mode: weighted(TripMode::ALL, TripMode::survey_count),
            age: weighted(AgeBand::ALL, AgeBand::survey_count),
            gender: weighted(Gender::ALL, Gender::survey_count),
            education: weighted(Education::ALL, Education::survey_count),
            income: weighted(IncomeBand::ALL, IncomeBand::survey_count),
            purpose: weighted(TripPurpose::ALL, TripPurpose::survey_count),
            // 0..=3 vehicles; mean 1.05, SD 0.80
            vehicles: WeightedIndex::new([25u32, 50, 20, 5]).expect("positive weights"),
            distance: LogNormal::new(mu, sigma2.sqrt()).expect("valid parameters"),
            start: Normal::new(14.08, 4.32).expect("valid parameters"),
        }
    }

    fn marginal<R: Rng>(&self, rng: &mut R, record_id: u64) -> TripRecord {
        let distance: f64 = self.distance.sample(rng);
        let start: f64 = self.start.sample(rng);
        TripRecord {
            record_id,
            age_band: pick(rng, &self.age),
            gender: pick(rng, &self.gender),
            education: pick(rng, &self.education),
            income_band: pick(rng, &self.income),
            household_vehicles: self.vehicles.sample(rng) as f64,
            trip_distance_miles: quantize_tenths(distance.clamp(0.1, 50.0)),
            start_time_hours: quantize_minutes(start.clamp(0.0, 23.98)),
            trip_purpose: pick(rng, &self.purpose),
            mode: Some(pick(rng, &self.mode)),
        }
    }

    fn separable<R: Rng>(&self, rng: &mut R, record_id: u64) -> TripRecord {
        let mode = pick(rng, &self.mode);
        let a = archetype(mode);
        let tenths = rng.random_range(a.distance_tenths.0..=a.distance_tenths.1);
        let vehicles = a.vehicles[rng.random_range(0..a.vehicles.len())];
        let minute = a.window_start * 60 + rng.random_range(0..120u32);
        let record = TripRecord {
            record_id,
            age_band: a.age,
            gender: a.gender,
            education: a.education,
            income_band: a.income,
            household_vehicles: f64::from(vehicles),
            trip_distance_miles: f64::from(tenths) / 10.0,
            start_time_hours: f64::from(minute) / 60.0,
            trip_purpose: a.purpose,
            mode: Some(mode),
        };
        debug_assert_eq!(
            separable_rule(record.trip_distance_miles, record.household_vehicles),
            mode
        );
        record
    }
}

/// Generate `n` labeled records with ids `1..=n`.
pub fn generate_synthetic(n: usize, profile: Profile, seed: u64) -> Result<Dataset, DataError> {
    generate_synthetic_from(n, profile, seed, 1)
}

/// As [`generate_synthetic`], with ids starting at `first_id` (for external
/// test sets that must not collide with a training corpus).
pub fn generate_synthetic_from(
    n: usize,
    profile: Profile,
    seed: u64,
    first_id: u64,
) -> Result<Dataset, DataError> {
    if n < 4 {
        return Err(DataError::TooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Marginals::new();
    let records = (0..n as u64)
        .map(|i| match profile {
            Profile::Marginal => m.marginal(&mut rng, first_id + i),
            Profile::Separable => m.separable(&mut rng, first_id + i),
        })
        .collect();
    let name = match profile {
        Profile::Marginal => "synthetic-marginal",
        Profile::Separable => "synthetic-separable",
    };
    Dataset::new(name, "synthetic", records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_small_rejected() {
        assert!(matches!(
            generate_synthetic(3, Profile::Marginal, 0),
            Err(DataError::TooSmall(3))
        ));
    }

    #[test]
    fn marginal_drive_share_near_survey() {
        let ds = generate_synthetic(1000, Profile::Marginal, 2024).unwrap();
        let share = ds.class_histogram()[TripMode::Drive.index()] as f64 / 10.0;
        assert!((share - 44.64).abs() <= 5.0, "drive share {share}%");
    }

    #[test]
    fn marginal_numeric_moments_are_plausible() {
        let ds = generate_synthetic(5000, Profile::Marginal, 1).unwrap();
        let n = ds.len() as f64;
        let mean = |f: fn(&TripRecord) -> f64| ds.records().iter().map(f).sum::<f64>() / n;
        assert!((mean(|r| r.trip_distance_miles) - 2.28).abs() < 0.2);
        assert!((mean(|r| r.start_time_hours) - 14.08).abs() < 0.3);
        assert!((mean(|r| r.household_vehicles) - 1.03).abs() < 0.1);
    }

    #[test]
    fn separable_records_follow_rule() {
        for seed in 0..20 {
            let ds = generate_synthetic(4, Profile::Separable, seed).unwrap();
            for r in ds.records() {
                assert_eq!(
                    Some(separable_rule(r.trip_distance_miles, r.household_vehicles)),
                    r.mode
                );
            }
        }
    }

    #[test]
    fn rule_regions() {
        assert_eq!(separable_rule(0.5, 2.0), TripMode::Walk);
        assert_eq!(separable_rule(0.8, 1.0), TripMode::Drive);
        assert_eq!(separable_rule(3.1, 0.0), TripMode::Transit);
        assert_eq!(separable_rule(3.0, 0.0), TripMode::BikeMicromobility);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(200, Profile::Separable, 77).unwrap();
        let b = generate_synthetic(200, Profile::Separable, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_from(10, Profile::Marginal, 1, 100_000).unwrap();
        assert_eq!(c.records()[0].record_id, 100_000);
    }

    /// Brute-force 1-NN over standardized raw features, leave-one-out.
    fn one_nn_accuracy(train: &[TripRecord], test: &[TripRecord]) -> f64 {
        fn features(r: &TripRecord) -> Vec<f64> {
            let mut f = vec![
                r.trip_distance_miles / 2.33,
                r.household_vehicles / 0.78,
                r.start_time_hours / 4.32,
            ];
            f.extend(
                [
                    r.age_band.index(),
                    r.gender.index(),
                    r.education.index(),
                    r.income_band.index(),
                    r.trip_purpose.index(),
                ]
                .map(|i| i as f64),
            );
            f
        }
        let train_f: Vec<_> = train.iter().map(features).collect();
        let mut correct = 0;
        for q in test {
            let qf = features(q);
            let best = train_f
                .iter()
                .enumerate()
                .filter(|(i, _)| train[*i].record_id != q.record_id)
                .map(|(i, f)| {
                    let d: f64 = f.iter().zip(&qf).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, i)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            if train[best].mode == q.mode {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn separable_one_nn_ceiling() {
        let ds = generate_synthetic(500, Profile::Separable, 31).unwrap();
        let acc = one_nn_accuracy(ds.records(), ds.records());
        assert!(acc >= 0.95, "1-NN accuracy {acc}");
    }
}

//! Planted-pattern trajectory generator for tests and experiments.
//!
//! Normal trajectories cycle through a fixed set of roles. Step `t`'s output is
//! a template of the query's topic, the step position, and the key word of the
//! previous output, so a history-conditioned predictor has something to learn.
//! An anomaly replaces one step's output with words from a disjoint vocabulary
//! while keeping its role.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MascError, Result};
use crate::trace::{Step, Trajectory};

pub const ROLES: [&str; 3] = ["planner", "solver", "reviewer"];

const TOPICS: [&str; 10] =
    ["budget", "garden", "engine", "recipe", "museum", "orbit", "harbor", "violin", "glacier", "ledger"];

const DETAILS: [[&str; 3]; 10] = [
    ["invoice", "expense", "forecast"],
    ["tulip", "compost", "trellis"],
    ["piston", "gasket", "throttle"],
    ["flour", "simmer", "garnish"],
    ["exhibit", "curator", "gallery"],
    ["satellite", "apogee", "thruster"],
    ["dock", "ferry", "anchor"],
    ["bow", "string", "concerto"],
    ["moraine", "crevasse", "icefield"],
    ["entry", "balance", "audit"],
];

const VERBS: [&str; 6] = ["outline", "compute", "verify", "refine", "summarize", "confirm"];

const UNRELATED: [&str; 16] = [
    "zebra", "quartz", "nebula", "pickle", "tundra", "saxophone", "lantern", "meteor", "cactus", "velvet", "origami",
    "thunder", "walrus", "paprika", "cobalt", "kayak",
];

/// Where a planted anomaly may fall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Within the first 20% of steps (at least step 1).
    Early,
    /// After the early window.
    Late,
    /// Anywhere in `1..=T`.
    Uniform,
}

/// Number of steps counted as early for a length-`t` trajectory.
pub fn early_window(steps: usize) -> usize {
    ((steps as f64) * 0.2).ceil().max(1.0) as usize
}

impl Placement {
    fn draw(self, steps: usize, rng: &mut impl Rng) -> usize {
        let w = early_window(steps);
        match self {
            Placement::Early => rng.random_range(1..=w),
            Placement::Late if steps > w => rng.random_range(w + 1..=steps),
            Placement::Late => steps,
            Placement::Uniform => rng.random_range(1..=steps),
        }
    }
}

fn normal_outputs(topic: usize, steps: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut prev_key = TOPICS[topic].to_string();
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let detail = DETAILS[topic][t % 3];
        let verb = VERBS[t % VERBS.len()];
        let extra = DETAILS[topic][rng.random_range(0..3)];
        outs.push(format!("{verb} the {} {detail} from {prev_key} with {extra}", TOPICS[topic]));
        prev_key = detail.to_string();
    }
    outs
}

fn anomalous_output(rng: &mut impl Rng) -> String {
    let n = rng.random_range(4..=6);
    let words: Vec<&str> = UNRELATED.choose_multiple(rng, n).copied().collect();
    words.join(" ")
}

fn build(id: String, topic: usize, steps: usize, rng: &mut impl Rng, plant: Option<usize>) -> Trajectory {
    let query = format!("handle the {} request number {}", TOPICS[topic], rng.random_range(1..=9));
    let outs = normal_outputs(topic, steps, rng);
    let steps = outs
        .into_iter()
        .enumerate()
        .map(|(i, out)| {
            let role = ROLES[i % ROLES.len()];
            match plant {
                Some(k) if k == i + 1 => Step::labeled(role, anomalous_output(rng), true),
                Some(_) => Step::labeled(role, out, false),
                None => Step::new(role, out),
            }
        })
        .collect();
    Trajectory { id, query, gt_answer: Some(TOPICS[topic].to_string()), steps }
}

/// `n` unlabeled normal trajectories of length `steps`.
pub fn normal_corpus(n: usize, steps: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if steps == 0 {
        return Err(MascError::precondition("trajectories need at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let topic = rng.random_range(0..TOPICS.len());
            build(format!("normal-{seed}-{i}"), topic, steps, &mut rng, None)
        })
        .collect())
}

/// `n` labeled trajectories with exactly one planted anomaly each. A fraction
/// `early_fraction` of them (rounded) uses [`Placement::Early`], the rest
/// `rest`; the order of placements is shuffled.
pub fn anomalous_corpus(
    n: usize,
    steps: usize,
    seed: u64,
    early_fraction: f64,
    rest: Placement,
) -> Result<Vec<Trajectory>> {
    if steps == 0 {
        return Err(MascError::precondition("trajectories need at least one step"));
    }
    if !(0.0..=1.0).contains(&early_fraction) {
        return Err(MascError::precondition("early_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    let n_early = (early_fraction * n as f64).round() as usize;
    let mut placements: Vec<Placement> = (0..n).map(|i| if i < n_early { Placement::Early } else { rest }).collect();
    placements.shuffle(&mut rng);
    Ok(placements
        .into_iter()
        .enumerate()
        .map(|(i, placement)| {
            let topic = rng.random_range(0..TOPICS.len());
            let k = placement.draw(steps, &mut rng);
            build(format!("planted-{seed}-{i}"), topic, steps, &mut rng, Some(k))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::error_position_histogram;

    #[test]
    fn normal_corpus_is_deterministic_and_unlabeled() {
        let a = normal_corpus(5, 6, 3).unwrap();
        assert_eq!(a, normal_corpus(5, 6, 3).unwrap());
        assert_ne!(a, normal_corpus(5, 6, 4).unwrap());
        assert!(a.iter().all(|t| t.len() == 6 && t.steps.iter().all(|s| s.label.is_none())));
        assert_eq!(a[0].steps[3].role, "planner");
    }

    #[test]
    fn exactly_one_plant_with_requested_mix() {
        let c = anomalous_corpus(40, 6, 1, 0.5, Placement::Late).unwrap();
        let w = early_window(6);
        let mut early = 0;
        for t in &c {
            let e = t.error_steps();
            assert_eq!(e.len(), 1);
            assert!(t.is_labeled());
            if e[0] <= w {
                early += 1;
            }
            let out = &t.steps[e[0] - 1].output;
            assert!(out.split(' ').all(|w| UNRELATED.contains(&w)));
        }
        assert_eq!(early, 20);
    }

    // χ² goodness of fit against a flat histogram, 5 bins (df = 4).
    #[test]
    fn uniform_placement_gives_flat_histogram() {
        let c = anomalous_corpus(1000, 10, 9, 0.0, Placement::Uniform).unwrap();
        let h = error_position_histogram(&c, 5).unwrap();
        assert_eq!(h.iter().sum::<u64>(), 1000);
        let expect = 200.0;
        let chi2: f64 = h.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        const CHI2_DF4_P01: f64 = 13.277;
        assert!(chi2 < CHI2_DF4_P01, "chi2 = {chi2}, counts {h:?}");
    }
}

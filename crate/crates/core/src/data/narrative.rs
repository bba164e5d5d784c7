//! Synthetic "movie" generator with planted temporal structure.
//!
//! Each movie is a sticky Markov chain over latent scenes. Every event emits
//! a clip built from its scene embedding, a scene-conditioned verb
//! embedding and a slowly drifting per-movie vector, plus per-timestep
//! Gaussian noise. A fraction of events is
//! emitted with the signal suppressed, so their content is recoverable only
//! from neighbouring events through the latent chain.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::corpus::{Corpus, Event, EventSequence, Relation, RelationTriplet};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NarrativeConfig {
    pub n_scenes: usize,
    pub n_verbs: usize,
    pub d_in: usize,
    /// Timesteps per clip (T).
    pub window: usize,
    /// Events per movie.
    pub seq_len: usize,
    pub n_movies: usize,
    /// Probability of staying in the same scene.
    pub stay_prob: f64,
    /// Probability of moving to the next scene (cyclically).
    pub advance_prob: f64,
    /// Explicit transition matrix; overrides `stay_prob` / `advance_prob`.
    pub transition: Option<Vec<Vec<f64>>>,
    pub noise_sigma: f64,
    /// Fraction of events whose signal is suppressed.
    pub suppression: f64,
    /// Signal gain applied to suppressed events.
    pub suppressed_gain: f64,
    /// Gain of a decoy scene embedding mixed into suppressed events.
    pub decoy_gain: f64,
    pub scene_scale: f64,
    pub verb_scale: f64,
    /// Scale of the slowly drifting per-movie component of every clip.
    pub drift_scale: f64,
    /// Autocorrelation of the drift between consecutive events.
    pub drift_rho: f64,
    pub verbs_per_scene: usize,
    /// Probability that a verb is drawn from its scene's favoured set.
    pub verb_focus: f64,
    /// Class template in `Relation::ALL` order.
    pub relation_probs: [f64; 4],
    pub triplets_per_movie: usize,
    pub label_noise: f64,
    pub stride_s: u32,
    /// Seeds embeddings, transitions and the relation table.
    pub world_seed: u64,
    /// Seeds the sampled movies.
    pub seed: u64,
}

impl Default for NarrativeConfig {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            n_verbs: 20,
            d_in: 32,
            window: 8,
            seq_len: 15,
            n_movies: 200,
            stay_prob: 0.85,
            advance_prob: 0.1,
            transition: None,
            noise_sigma: 0.5,
            suppression: 0.5,
            suppressed_gain: 0.3,
            decoy_gain: 0.6,
            scene_scale: 1.0,
            verb_scale: 1.0,
            drift_scale: 1.0,
            drift_rho: 0.9,
            verbs_per_scene: 3,
            verb_focus: 0.8,
            relation_probs: [0.25; 4],
            triplets_per_movie: 8,
            label_noise: 0.0,
            stride_s: 1,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl NarrativeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_scenes < 2 {
            return bad(format!("n_scenes must be >= 2, got {}", self.n_scenes));
        }
        if self.n_verbs < 5 {
            return bad(format!("n_verbs must be >= 5, got {}", self.n_verbs));
        }
        if self.d_in == 0 || self.window == 0 || self.n_movies == 0 || self.seq_len < 2 {
            return bad("d_in, window, n_movies must be positive and seq_len >= 2".into());
        }
        if self.verbs_per_scene == 0 || self.verbs_per_scene > self.n_verbs {
            return bad(format!("verbs_per_scene must be in 1..={}", self.n_verbs));
        }
        for (name, p) in [
            ("suppression", self.suppression),
            ("verb_focus", self.verb_focus),
            ("label_noise", self.label_noise),
            ("stay_prob", self.stay_prob),
            ("advance_prob", self.advance_prob),
            ("drift_rho", self.drift_rho),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.transition.is_none() && self.stay_prob + self.advance_prob > 1.0 + 1e-12 {
            return bad("stay_prob + advance_prob exceeds 1".into());
        }
        if self.relation_probs.iter().any(|&p| p < 0.0) || self.relation_probs.iter().sum::<f64>() <= 0.0 {
            return bad("relation_probs must be non-negative with positive sum".into());
        }
        if self.noise_sigma < 0.0 || self.drift_scale < 0.0 || self.decoy_gain < 0.0 {
            return bad("noise_sigma, drift_scale and decoy_gain must be >= 0".into());
        }
        Ok(())
    }

    /// Row-stochastic latent transition matrix.
    pub fn transition_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let s = self.n_scenes;
        let m = match &self.transition {
            Some(m) => m.clone(),
            None => (0..s)
                .map(|i| {
                    let mut row = vec![0.0; s];
                    let jump = (1.0 - self.stay_prob - self.advance_prob).max(0.0);
                    let others = s.saturating_sub(2).max(1) as f64;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if j == i {
                            self.stay_prob
                        } else if j == (i + 1) % s {
                            self.advance_prob
                        } else {
                            jump / others
                        };
                    }
                    if s == 2 {
                        row[(i + 1) % 2] += jump;
                    }
                    row
                })
                .collect(),
        };
        validate_transition(&m, s)?;
        Ok(m)
    }
}

fn validate_transition(m: &[Vec<f64>], s: usize) -> Result<()> {
    if m.len() != s || m.iter().any(|r| r.len() != s) {
        return Err(Error::Config(format!("transition matrix must be {s}x{s}")));
    }
    for (i, row) in m.iter().enumerate() {
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Config(format!("transition row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            return Err(Error::Config(format!("degenerate transition matrix: row {i} is all zeros")));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("transition row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Everything shared between corpora drawn from one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub scene_emb: Vec<Vec<f64>>,
    pub verb_emb: Vec<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
    /// Per-scene distribution over verbs.
    pub verb_dist: Vec<Vec<f64>>,
    /// Relation of an ordered pair as a function of the two latent scenes.
    pub relation_table: Vec<Vec<Relation>>,
}

impl World {
    pub fn build(cfg: &NarrativeConfig) -> Result<Self> {
        cfg.validate()?;
        let transition = cfg.transition_matrix()?;
        let mut rng = rng_from_seed(cfg.world_seed);
        let gauss = |rng: &mut Rng, n: usize, scale: f64| -> Vec<f64> {
            let d = Normal::new(0.0, scale.max(0.0)).expect("finite scale");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let scene_emb = (0..cfg.n_scenes).map(|_| gauss(&mut rng, cfg.d_in, cfg.scene_scale)).collect();
        let verb_emb = (0..cfg.n_verbs).map(|_| gauss(&mut rng, cfg.d_in, cfg.verb_scale)).collect();
        let verb_dist = (0..cfg.n_scenes)
            .map(|_| {
                let favoured = sample_indices(&mut rng, cfg.n_verbs, cfg.verbs_per_scene);
                let mut p = vec![(1.0 - cfg.verb_focus) / cfg.n_verbs as f64; cfg.n_verbs];
                for v in favoured.iter() {
                    p[v] += cfg.verb_focus / cfg.verbs_per_scene as f64;
                }
                p
            })
            .collect();
        // additive scores keep the relation linearly decodable from the two scenes
        let a: Vec<Vec<f64>> = (0..cfg.n_scenes).map(|_| gauss(&mut rng, 4, 1.0)).collect();
        let b: Vec<Vec<f64>> = (0..cfg.n_scenes).map(|_| gauss(&mut rng, 4, 1.0)).collect();
        let relation_table = (0..cfg.n_scenes)
            .map(|sa| {
                (0..cfg.n_scenes)
                    .map(|sb| {
                        let best = (0..4)
                            .max_by(|&i, &j| (a[sa][i] + b[sb][i]).total_cmp(&(a[sa][j] + b[sb][j])))
                            .expect("four classes");
                        Relation::ALL[best]
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            scene_emb,
            verb_emb,
            transition,
            verb_dist,
            relation_table,
        })
    }
}

/// Latent state behind a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub scenes: Vec<Vec<usize>>,
    pub suppressed: Vec<Vec<bool>>,
    pub world: World,
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples a latent scene chain of length `len`.
pub fn sample_chain(transition: &[Vec<f64>], len: usize, rng: &mut Rng) -> Vec<usize> {
    let s = transition.len();
    let mut chain = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..s);
    for t in 0..len {
        if t > 0 {
            cur = sample_categorical(&transition[cur], rng);
        }
        chain.push(cur);
    }
    chain
}

pub fn generate_corpus(cfg: &NarrativeConfig) -> Result<(Corpus, GenerationTrace)> {
    let world = World::build(cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let drift_noise = Normal::new(0.0, cfg.drift_scale).expect("validated scale");
    let innovation = (1.0 - cfg.drift_rho * cfg.drift_rho).sqrt();
    let mut sequences = Vec::with_capacity(cfg.n_movies);
    let mut scenes = Vec::with_capacity(cfg.n_movies);
    let mut suppressed = Vec::with_capacity(cfg.n_movies);
    for movie in 0..cfg.n_movies {
        let chain = sample_chain(&world.transition, cfg.seq_len, &mut rng);
        let mut events = Vec::with_capacity(cfg.seq_len);
        let mut supp = Vec::with_capacity(cfg.seq_len);
        let mut drift: Vec<f64> = (0..cfg.d_in).map(|_| drift_noise.sample(&mut rng)).collect();
        for (t, &scene) in chain.iter().enumerate() {
            if t > 0 {
                for x in &mut drift {
                    *x = cfg.drift_rho * *x + innovation * drift_noise.sample(&mut rng);
                }
            }
            let verb = sample_categorical(&world.verb_dist[scene], &mut rng);
            let hidden = rng.random::<f64>() < cfg.suppression;
            let gain = if hidden { cfg.suppressed_gain } else { 1.0 };
            let decoy = if hidden && cfg.decoy_gain > 0.0 {
                let other = (scene + rng.random_range(1..cfg.n_scenes)) % cfg.n_scenes;
                Some(&world.scene_emb[other])
            } else {
                None
            };
            let mut data = Vec::with_capacity(cfg.window * cfg.d_in);
            for _ in 0..cfg.window {
                for k in 0..cfg.d_in {
                    let signal = world.scene_emb[scene][k] + world.verb_emb[verb][k] + drift[k];
                    let distractor = decoy.map_or(0.0, |e| cfg.decoy_gain * e[k]);
                    data.push((gain * signal + distractor + noise.sample(&mut rng)) as f32);
                }
            }
            events.push(Event {
                clip: Tensor::new(vec![cfg.window, cfg.d_in], data)?,
                verb: verb as u32,
                scene: scene as u32,
            });
            supp.push(hidden);
        }
        sequences.push(EventSequence {
            movie_id: movie as u32,
            stride_s: cfg.stride_s,
            events,
        });
        scenes.push(chain);
        suppressed.push(supp);
    }
    let n_triplets = cfg.triplets_per_movie * cfg.n_movies;
    let mut label_rng = rng_from_seed(crate::rng::derive_seed(cfg.seed, "relations"));
    let mut triplets = derive_relation_labels(&scenes, &world.relation_table, &cfg.relation_probs, n_triplets, &mut label_rng);
    if cfg.label_noise > 0.0 {
        for t in &mut triplets {
            if label_rng.random::<f64>() < cfg.label_noise {
                t.relation = Relation::ALL[label_rng.random_range(0..4)];
            }
        }
    }
    let corpus = Corpus {
        d_in: cfg.d_in,
        window: cfg.window,
        stride_s: cfg.stride_s,
        sequences,
        triplets,
    };
    Ok((
        corpus,
        GenerationTrace {
            scenes,
            suppressed,
            world,
        },
    ))
}

/// Samples `count` labelled pairs. A class is drawn from `template`, then a
/// pair realizing it: adjacent events of one movie for the related classes,
/// events of two different movies for `Unrelated`. The label is always the
/// relation table entry of the pair's latent scenes. Each unordered pair is
/// used at most once.
pub fn derive_relation_labels(
    scenes: &[Vec<usize>],
    table: &[Vec<Relation>],
    template: &[f64; 4],
    count: usize,
    rng: &mut Rng,
) -> Vec<RelationTriplet> {
    let mut offsets = Vec::with_capacity(scenes.len());
    let mut acc = 0usize;
    for s in scenes {
        offsets.push(acc);
        acc += s.len();
    }
    let mut adjacent: [Vec<(usize, usize)>; 4] = Default::default();
    for (m, chain) in scenes.iter().enumerate() {
        for t in 0..chain.len().saturating_sub(1) {
            let (i, j) = (offsets[m] + t, offsets[m] + t + 1);
            for (a, b, sa, sb) in [(i, j, chain[t], chain[t + 1]), (j, i, chain[t + 1], chain[t])] {
                let r = table[sa][sb];
                if r != Relation::Unrelated {
                    adjacent[r.index()].push((a, b));
                }
            }
        }
    }
    let flat: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(m, c)| (0..c.len()).map(move |t| (m, t)))
        .collect();
    let can_cross = scenes.len() >= 2 && table.iter().flatten().any(|&r| r == Relation::Unrelated);

    let mut probs = *template;
    for r in [Relation::EnabledBy, Relation::ReactionTo, Relation::Causes] {
        if adjacent[r.index()].is_empty() {
            probs[r.index()] = 0.0;
        }
    }
    if !can_cross {
        probs[Relation::Unrelated.index()] = 0.0;
    }
    if probs.iter().sum::<f64>() <= 0.0 {
        return Vec::new();
    }

    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_tries = 64;
    'outer: while out.len() < count {
        let class = Relation::ALL[sample_categorical(&probs, rng)];
        for _ in 0..max_tries {
            let pair = if class == Relation::Unrelated {
                let (ma, ta) = flat[rng.random_range(0..flat.len())];
                let (mb, tb) = flat[rng.random_range(0..flat.len())];
                if ma == mb || table[scenes[ma][ta]][scenes[mb][tb]] != Relation::Unrelated {
                    continue;
                }
                (offsets[ma] + ta, offsets[mb] + tb)
            } else {
                let cands = &adjacent[class.index()];
                cands[rng.random_range(0..cands.len())]
            };
            let key = (pair.0.min(pair.1), pair.0.max(pair.1));
            if used.insert(key) {
                out.push(RelationTriplet {
                    a_idx: pair.0 as u32,
                    b_idx: pair.1 as u32,
                    relation: class,
                });
                continue 'outer;
            }
        }
        // candidates for this class are exhausted
        probs[class.index()] = 0.0;
        if probs.iter().sum::<f64>() <= 0.0 {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_is_row_stochastic() {
        let m = NarrativeConfig::default().transition_matrix().unwrap();
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let cfg = NarrativeConfig {
            n_scenes: 2,
            transition: Some(vec![vec![0.5, 0.5], vec![0.0, 0.0]]),
            ..Default::default()
        };
        let err = generate_corpus(&cfg).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = NarrativeConfig {
            n_movies: 10,
            ..Default::default()
        };
        let (a, _) = generate_corpus(&cfg).unwrap();
        let (b, _) = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_corpus(&NarrativeConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_functions_of_latent_scenes() {
        let cfg = NarrativeConfig {
            n_movies: 30,
            ..Default::default()
        };
        let (corpus, trace) = generate_corpus(&cfg).unwrap();
        let scenes: Vec<usize> = trace.scenes.iter().flatten().copied().collect();
        for t in &corpus.triplets {
            let r = trace.world.relation_table[scenes[t.a_idx as usize]][scenes[t.b_idx as usize]];
            assert_eq!(r, t.relation);
        }
    }

    #[test]
    fn validation_catches_small_vocab() {
        let cfg = NarrativeConfig {
            n_verbs: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

//! Synthetic ratings with latent genre tastes.
//!
//! Items belong to one of `genres` genres and carry a quality score; users
//! have a taste per genre. A rating is high when taste plus quality plus noise
//! is positive, so a user's past likes carry signal about future ones.

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::rng::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    /// Inclusive range of interactions per user.
    pub per_user: (usize, usize),
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 300,
            genres: 6,
            per_user: (8, 40),
            noise: 0.5,
            seed: 1,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Vec<Interaction> {
    let mut rng = Rng::new(cfg.seed, Stream::DataGen);
    let genre: Vec<usize> = (0..cfg.items).map(|_| rng.below(cfg.genres.max(1))).collect();
    let quality: Vec<f64> = (0..cfg.items).map(|_| 0.5 * rng.normal()).collect();
    let mut out = Vec::new();
    for u in 0..cfg.users {
        let taste: Vec<f64> = (0..cfg.genres.max(1)).map(|_| rng.normal()).collect();
        let hi = cfg.per_user.1.min(cfg.items);
        let count = rng.range_inclusive(cfg.per_user.0.min(hi), hi);
        let items = rng.sample_distinct(cfg.items, count);
        for (t, &i) in items.iter().enumerate() {
            let score = taste[genre[i]] + quality[i] + cfg.noise * rng.normal();
            let rating = if score > 0.0 {
                4 + u8::from(score > 1.0)
            } else {
                3 - rng.below(3) as u8
            };
            out.push(Interaction {
                user: u as u32 + 1,
                item: i as u32 + 1,
                rating,
                timestamp: 1_000_000 + (u * 1000 + t) as i64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rec::binarize;

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert!(a.iter().all(|x| (1..=5).contains(&x.rating)));
        let liked = a.iter().filter(|x| binarize(x.rating)).count() as f64 / a.len() as f64;
        assert!(liked > 0.3 && liked < 0.7, "like rate {liked}");
    }
}

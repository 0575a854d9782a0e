//! Episodic sampling for few-shot training and evaluation.

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::EpisodeShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Test-harness switch: reuse the support items as the query set.
    pub overlap_support_query: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 12,
            k_shot: 5,
            n_query: 5,
            overlap_support_query: false,
        }
    }
}

impl EpisodeConfig {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
        }
    }
}

/// One sampled episode: way-major support indices, then way-major query
/// indices, referring into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub shape: EpisodeShape,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    /// Dataset indices in embedding-row order (support block then query
    /// block), matching the layout the prototypical loss expects.
    pub fn row_indices(&self) -> Vec<usize> {
        let mut rows = self.support.clone();
        rows.extend_from_slice(&self.query);
        rows
    }

    pub fn total_items(&self) -> usize {
        self.support.len() + self.query.len()
    }
}

/// Uniformly sample `n_way` classes without replacement, then `k_shot +
/// n_query` items per class without replacement from that class's pool.
pub fn sample_episode(
    pool_by_class: &[Vec<usize>],
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let eligible: Vec<usize> = (0..pool_by_class.len())
        .filter(|&c| !pool_by_class[c].is_empty())
        .collect();
    if eligible.len() < cfg.n_way {
        return Err(Error::InsufficientData {
            what: "episode classes",
            needed: cfg.n_way,
            available: eligible.len(),
        });
    }
    let per_class = if cfg.overlap_support_query {
        if cfg.k_shot != cfg.n_query {
            return Err(Error::InvalidConfig {
                field: "episode.overlap_support_query".into(),
                detail: "overlap mode requires k_shot == n_query".into(),
            });
        }
        cfg.k_shot
    } else {
        cfg.k_shot + cfg.n_query
    };

    let picked = sample_without_replacement(rng, eligible.len(), cfg.n_way);
    let mut classes: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();
    classes.sort_unstable(); // stable way ordering regardless of draw order

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.n_query);
    for &class in &classes {
        let pool = &pool_by_class[class];
        if pool.len() < per_class {
            return Err(Error::InsufficientData {
                what: "episode items per class",
                needed: per_class,
                available: pool.len(),
            });
        }
        let items = sample_without_replacement(rng, pool.len(), per_class);
        let items: Vec<usize> = items.iter().map(|i| pool[i]).collect();
        support.extend_from_slice(&items[..cfg.k_shot]);
        if cfg.overlap_support_query {
            query.extend_from_slice(&items[..cfg.k_shot]);
        } else {
            query.extend_from_slice(&items[cfg.k_shot..]);
        }
    }
    Ok(Episode {
        shape: cfg.shape(),
        classes,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(classes: usize, per: usize) -> Vec<Vec<usize>> {
        (0..classes)
            .map(|c| (0..per).map(|i| c * per + i).collect())
            .collect()
    }

    #[test]
    fn n_way_equal_to_classes_covers_all() {
        let p = pool(5, 12);
        let cfg = EpisodeConfig {
            n_way: 5,
            k_shot: 3,
            n_query: 2,
            overlap_support_query: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&p, &cfg, &mut rng).unwrap();
        assert_eq!(ep.classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn twelve_way_five_shot_five_query_is_120_items() {
        let p = pool(16, 10);
        let cfg = EpisodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&p, &cfg, &mut rng).unwrap();
        assert_eq!(ep.total_items(), 120);
        assert_eq!(ep.support.len(), 60);
        assert_eq!(ep.query.len(), 60);
        // support and query never overlap in normal mode
        for s in &ep.support {
            assert!(!ep.query.contains(s));
        }
    }

    #[test]
    fn fixed_seed_reproduces_episode() {
        let p = pool(16, 10);
        let cfg = EpisodeConfig::default();
        let a = sample_episode(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_classes_or_items() {
        let p = pool(4, 10);
        let cfg = EpisodeConfig::default(); // wants 12 ways
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_episode(&p, &cfg, &mut rng),
            Err(Error::InsufficientData { .. })
        ));
        let p = pool(12, 8); // 8 < 5 + 5
        assert!(matches!(
            sample_episode(&p, &EpisodeConfig::default(), &mut rng),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn overlap_mode_reuses_support() {
        let p = pool(3, 6);
        let cfg = EpisodeConfig {
            n_way: 3,
            k_shot: 2,
            n_query: 2,
            overlap_support_query: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&p, &cfg, &mut rng).unwrap();
        assert_eq!(ep.support, ep.query);
    }
}

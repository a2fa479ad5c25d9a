//! The hidden per-episode latent: how latent cube vertices appear perceptually,
//! which axis and direction each potion color pushes along, and which cube
//! edges exist.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvConfig;

/// Signed axis permutation. Perceptual feature `j` reads latent bit
/// `perm[j]`, inverted when bit `j` of `flips` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rotation {
    pub perm: [u8; 3],
    pub flips: u8,
}

impl Rotation {
    pub fn identity() -> Self {
        Self { perm: [0, 1, 2], flips: 0 }
    }

    /// All `axes! * 2^axes` signed permutations.
    pub fn enumerate(axes: usize) -> Vec<Rotation> {
        let mut perms = Vec::new();
        permutations(axes, &mut Vec::new(), &mut perms);
        let mut out = Vec::with_capacity(perms.len() << axes);
        for p in &perms {
            for flips in 0..(1u8 << axes) {
                let mut perm = [0u8; 3];
                perm[..axes].copy_from_slice(p);
                for (j, slot) in perm.iter_mut().enumerate().skip(axes) {
                    *slot = j as u8;
                }
                out.push(Rotation { perm, flips });
            }
        }
        out
    }

    /// Perceptual bit pattern of a latent vertex: bit `j` set means feature
    /// `j` shows its high value.
    pub fn pattern(&self, vertex: usize, axes: usize) -> usize {
        (0..axes).fold(0, |acc, j| {
            let bit = (vertex >> self.perm[j]) & 1 ^ ((self.flips as usize >> j) & 1);
            acc | (bit << j)
        })
    }

    /// Latent vertex showing the given perceptual pattern.
    pub fn vertex_of(&self, pattern: usize, axes: usize) -> usize {
        (0..axes).fold(0, |acc, j| {
            let bit = (pattern >> j) & 1 ^ ((self.flips as usize >> j) & 1);
            acc | (bit << self.perm[j])
        })
    }
}

fn permutations(n: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if prefix.len() == n {
        out.push(prefix.clone());
        return;
    }
    for i in 0..n as u8 {
        if !prefix.contains(&i) {
            prefix.push(i);
            permutations(n, prefix, out);
            prefix.pop();
        }
    }
}

/// Effect of one potion color: the latent axis it moves along and the sign of
/// the move (+1 sets the axis bit, -1 clears it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PotionEffect {
    pub axis: u8,
    pub sign: i8,
}

/// Colors `2p` and `2p + 1` always form a pair with opposite effects.
pub fn paired_color(color: usize) -> usize {
    color ^ 1
}

/// Index of the cube edge leaving `vertex` along `axis`.
pub fn edge_index(vertex: usize, axis: usize, axes: usize) -> usize {
    let low = vertex & ((1 << axis) - 1);
    let high = (vertex >> (axis + 1)) << axis;
    (axis << (axes - 1)) | high | low
}

/// Every edge subset of the hypercube that keeps all vertices connected.
pub fn connected_edge_sets(axes: usize) -> Vec<u16> {
    let edges = axes << (axes - 1);
    (0..(1u32 << edges))
        .map(|m| m as u16)
        .filter(|&m| is_connected(m, axes))
        .collect()
}

/// Whether the graph of present edges spans all `2^axes` vertices.
pub fn is_connected(edges: u16, axes: usize) -> bool {
    let vertices = 1usize << axes;
    let mut seen = 1u32;
    let mut stack = vec![0usize];
    while let Some(v) = stack.pop() {
        for axis in 0..axes {
            let u = v ^ (1 << axis);
            if edges >> edge_index(v, axis, axes) & 1 == 1 && seen >> u & 1 == 0 {
                seen |= 1 << u;
                stack.push(u);
            }
        }
    }
    seen.count_ones() as usize == vertices
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chemistry {
    pub axes: usize,
    pub rotation: Rotation,
    /// Indexed by potion color.
    pub potion_effects: Vec<PotionEffect>,
    /// Bit `edge_index(v, axis)` set when that edge exists.
    pub edges: u16,
}

impl Chemistry {
    pub fn sample<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Chemistry {
        let axes = config.num_feature_axes;
        let rotations = Rotation::enumerate(axes);
        let rotation = *rotations.choose(rng).expect("non-empty rotation set");

        let mut pair_axes: Vec<u8> = (0..axes as u8).collect();
        pair_axes.shuffle(rng);
        let mut potion_effects = Vec::with_capacity(2 * axes);
        for &axis in &pair_axes {
            let sign: i8 = if rng.gen::<bool>() { 1 } else { -1 };
            potion_effects.push(PotionEffect { axis, sign });
            potion_effects.push(PotionEffect { axis, sign: -sign });
        }

        let all_edges = ((1u32 << config.num_edges()) - 1) as u16;
        let edges = if config.edge_deletion_enabled {
            // uniform over connected subsets by rejection
            loop {
                let candidate = (rng.gen::<u32>() as u16) & all_edges;
                if is_connected(candidate, axes) {
                    break candidate;
                }
            }
        } else {
            all_edges
        };

        Chemistry { axes, rotation, potion_effects, edges }
    }

    /// The full chemistry space for a config, in a fixed order.
    pub fn enumerate(config: &EnvConfig) -> Vec<Chemistry> {
        let axes = config.num_feature_axes;
        let rotations = Rotation::enumerate(axes);
        let edge_sets = if config.edge_deletion_enabled {
            connected_edge_sets(axes)
        } else {
            vec![((1u32 << config.num_edges()) - 1) as u16]
        };
        let mut assignments = Vec::new();
        let mut perms = Vec::new();
        permutations(axes, &mut Vec::new(), &mut perms);
        for perm in &perms {
            for signs in 0..(1u32 << axes) {
                let mut effects = Vec::with_capacity(2 * axes);
                for (pair, &axis) in perm.iter().enumerate() {
                    let sign = if signs >> pair & 1 == 0 { 1 } else { -1 };
                    effects.push(PotionEffect { axis, sign });
                    effects.push(PotionEffect { axis, sign: -sign });
                }
                assignments.push(effects);
            }
        }
        let mut out = Vec::with_capacity(rotations.len() * assignments.len() * edge_sets.len());
        for &rotation in &rotations {
            for effects in &assignments {
                for &edges in &edge_sets {
                    out.push(Chemistry {
                        axes,
                        rotation,
                        potion_effects: effects.clone(),
                        edges,
                    });
                }
            }
        }
        out
    }

    /// Vertex reached by applying `color` to a stone at `vertex`, or `None`
    /// when the direction does not match or the edge is missing.
    pub fn apply(&self, vertex: usize, color: usize) -> Option<usize> {
        let PotionEffect { axis, sign } = self.potion_effects[color];
        let axis = axis as usize;
        let bit = vertex >> axis & 1;
        if (sign > 0) != (bit == 0) {
            return None;
        }
        if self.edges >> edge_index(vertex, axis, self.axes) & 1 == 0 {
            return None;
        }
        Some(vertex ^ (1 << axis))
    }

    pub fn features(&self, vertex: usize, values: [f32; 2]) -> Vec<f32> {
        let pattern = self.rotation.pattern(vertex, self.axes);
        (0..self.axes).map(|j| values[pattern >> j & 1]).collect()
    }

    /// Inverse of [`Chemistry::features`]; `None` if a value is outside the
    /// feature vocabulary.
    pub fn vertex_from_features(&self, features: &[f32], values: [f32; 2]) -> Option<usize> {
        let mut pattern = 0;
        for (j, &f) in features.iter().enumerate() {
            if f == values[1] {
                pattern |= 1 << j;
            } else if f != values[0] {
                return None;
            }
        }
        Some(self.rotation.vertex_of(pattern, self.axes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn rotation_counts() {
        assert_eq!(Rotation::enumerate(2).len(), 8);
        assert_eq!(Rotation::enumerate(3).len(), 48);
        let unique: HashSet<_> = Rotation::enumerate(3).into_iter().collect();
        assert_eq!(unique.len(), 48);
    }

    #[test]
    fn rotation_pattern_is_bijective() {
        for axes in 2..=3 {
            for r in Rotation::enumerate(axes) {
                let images: HashSet<_> = (0..1 << axes).map(|v| r.pattern(v, axes)).collect();
                assert_eq!(images.len(), 1 << axes);
                for v in 0..1 << axes {
                    assert_eq!(r.vertex_of(r.pattern(v, axes), axes), v);
                }
            }
        }
    }

    #[test]
    fn edge_indices_cover_every_edge_once() {
        for axes in 2..=3usize {
            let mut hit = vec![0; axes << (axes - 1)];
            for v in 0..1usize << axes {
                for axis in 0..axes {
                    if v >> axis & 1 == 0 {
                        hit[edge_index(v, axis, axes)] += 1;
                    }
                    // both endpoints agree
                    assert_eq!(edge_index(v, axis, axes), edge_index(v ^ 1 << axis, axis, axes));
                }
            }
            assert!(hit.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn square_connected_subsets() {
        // full square plus the four spanning paths
        assert_eq!(connected_edge_sets(2).len(), 5);
        assert!(!is_connected(0b0011, 2) || !is_connected(0b1100, 2));
    }

    #[test]
    fn full_cube_is_connected() {
        assert!(is_connected(0x0fff, 3));
        assert!(!is_connected(0, 3));
    }

    #[test]
    fn paired_colors_cancel() {
        let config = EnvConfig { edge_deletion_enabled: false, ..EnvConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chem = Chemistry::sample(&config, &mut rng);
        for v in 0..8 {
            for c in 0..6 {
                if let Some(u) = chem.apply(v, c) {
                    assert_eq!(chem.apply(u, paired_color(c)), Some(v));
                    assert_eq!(chem.apply(v, paired_color(c)), None);
                }
            }
        }
    }

    #[test]
    fn features_round_trip() {
        let config = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chem = Chemistry::sample(&config, &mut rng);
        for v in 0..8 {
            let f = chem.features(v, config.feature_values);
            assert_eq!(chem.vertex_from_features(&f, config.feature_values), Some(v));
        }
        assert_eq!(chem.vertex_from_features(&[0.5, 1.0, 1.0], config.feature_values), None);
    }
}

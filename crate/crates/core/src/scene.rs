//! Patch-frame graph: frames with poses, patches with depths, and the
//! bipartite edges carrying revised targets and confidence weights.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::Pose;
use crate::projective::{reproject, Intrinsics, DEFAULT_Z_MIN};

pub const SCENE_VERSION: &str = "ba-grad/1";
pub const DEFAULT_D_MIN: f64 = 0.1;
pub const DEFAULT_D_MAX: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub index: usize,
    /// Current estimate (world-to-camera).
    pub pose: Pose,
    pub gt_pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub k: usize,
    /// Source frame index.
    pub i: usize,
    pub center: Vector2<f64>,
    pub depth: f64,
    pub gt_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    /// Patch index.
    pub k: usize,
    /// Target frame index.
    pub j: usize,
    /// Revised target coordinate fed to bundle adjustment.
    pub target: Vector2<f64>,
    /// Per-coordinate confidence in `[0, 1]`.
    pub weight: Vector2<f64>,
    /// Ground-truth reprojection, once computed.
    pub gt_target: Option<Vector2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGraph {
    pub version: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub patches: Vec<Patch>,
    pub edges: Vec<Edge>,
}

/// Original indices of the elements kept by [`PatchGraph::window_with_map`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowMap {
    pub frames: Vec<usize>,
    pub patches: Vec<usize>,
    pub edges: Vec<usize>,
}

impl PatchGraph {
    pub fn new(intrinsics: Intrinsics, frames: Vec<Frame>, patches: Vec<Patch>) -> Self {
        Self {
            version: SCENE_VERSION.to_string(),
            intrinsics,
            frames,
            patches,
            edges: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported scene version {:?}",
                self.version
            )));
        }
        self.intrinsics.validate()?;
        for (n, f) in self.frames.iter().enumerate() {
            if f.index != n {
                return Err(Error::InvalidInput(format!("frame {n} has index {}", f.index)));
            }
        }
        for (n, p) in self.patches.iter().enumerate() {
            if p.k != n {
                return Err(Error::InvalidInput(format!("patch {n} has id {}", p.k)));
            }
            if p.i >= self.frames.len() {
                return Err(Error::InvalidInput(format!("patch {n} references frame {}", p.i)));
            }
            if !(p.depth > 0.0 && p.gt_depth > 0.0) {
                return Err(Error::InvalidDepth(p.depth.min(p.gt_depth)));
            }
        }
        for (n, e) in self.edges.iter().enumerate() {
            if e.k >= self.patches.len() || e.j >= self.frames.len() {
                return Err(Error::InvalidInput(format!("edge {n} references a missing node")));
            }
            if e.weight.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidInput(format!("edge {n} weight outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn source_of(&self, e: &Edge) -> usize {
        self.patches[e.k].i
    }

    /// Rebuild the edge set so that `(k, j)` exists iff `0 < |j - i| <= r`.
    /// Edges that survive keep their data; new edges start at the patch
    /// center with unit weight.
    pub fn build_edges(&self, radius: usize) -> PatchGraph {
        let existing: HashMap<(usize, usize), Edge> =
            self.edges.iter().map(|e| ((e.k, e.j), *e)).collect();
        let mut edges = Vec::new();
        for p in &self.patches {
            let lo = p.i.saturating_sub(radius);
            let hi = (p.i + radius).min(self.frames.len().saturating_sub(1));
            for j in lo..=hi {
                if j == p.i || self.frames.is_empty() {
                    continue;
                }
                edges.push(existing.get(&(p.k, j)).copied().unwrap_or(Edge {
                    k: p.k,
                    j,
                    target: p.center,
                    weight: Vector2::new(1.0, 1.0),
                    gt_target: None,
                }));
            }
        }
        PatchGraph {
            edges,
            ..self.clone()
        }
    }

    /// Fill `gt_target` by reprojecting with ground-truth poses and depths.
    /// Edges whose ground-truth reprojection violates cheirality are removed.
    pub fn gt_targets(&self) -> PatchGraph {
        let mut edges = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            let p = &self.patches[e.k];
            let r = reproject(
                &p.center,
                p.gt_depth,
                &self.frames[p.i].gt_pose,
                &self.frames[e.j].gt_pose,
                &self.intrinsics,
                DEFAULT_Z_MIN,
            );
            if let Ok(t) = r {
                edges.push(Edge {
                    gt_target: Some(t),
                    ..*e
                });
            }
        }
        PatchGraph {
            edges,
            ..self.clone()
        }
    }

    pub fn window(&self, first: usize, count: usize) -> Result<PatchGraph> {
        self.window_with_map(first, count).map(|(g, _)| g)
    }

    /// Subgraph over frames `[first, first + count)`, reindexed from zero,
    /// together with the original indices of everything kept.
    pub fn window_with_map(&self, first: usize, count: usize) -> Result<(PatchGraph, WindowMap)> {
        let n = self.frames.len();
        if count == 0 || first + count > n {
            return Err(Error::EmptyWindow {
                first,
                count,
                n_frames: n,
            });
        }
        let in_range = |f: usize| f >= first && f < first + count;
        let mut map = WindowMap::default();
        let frames: Vec<Frame> = (first..first + count)
            .map(|f| {
                map.frames.push(f);
                Frame {
                    index: f - first,
                    ..self.frames[f]
                }
            })
            .collect();
        let mut patch_new = vec![usize::MAX; self.patches.len()];
        let mut patches = Vec::new();
        for p in self.patches.iter().filter(|p| in_range(p.i)) {
            patch_new[p.k] = patches.len();
            map.patches.push(p.k);
            patches.push(Patch {
                k: patches.len(),
                i: p.i - first,
                ..*p
            });
        }
        let mut edges = Vec::new();
        for (n, e) in self.edges.iter().enumerate() {
            if patch_new[e.k] != usize::MAX && in_range(e.j) {
                map.edges.push(n);
                edges.push(Edge {
                    k: patch_new[e.k],
                    j: e.j - first,
                    ..*e
                });
            }
        }
        Ok((
            PatchGraph {
                version: self.version.clone(),
                intrinsics: self.intrinsics,
                frames,
                patches,
                edges,
            },
            map,
        ))
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.patches.iter().map(|p| p.depth).collect()
    }

    pub fn gt_depths(&self) -> Vec<f64> {
        self.patches.iter().map(|p| p.gt_depth).collect()
    }

    /// Copy of the graph with the current estimates replaced.
    pub fn with_estimates(&self, poses: &[Pose], depths: &[f64]) -> PatchGraph {
        let mut g = self.clone();
        for (f, p) in g.frames.iter_mut().zip(poses) {
            f.pose = *p;
        }
        for (p, d) in g.patches.iter_mut().zip(depths) {
            p.depth = *d;
        }
        g
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<PatchGraph> {
        let g: PatchGraph =
            serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<PatchGraph> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;
    use nalgebra::Vector3;
    use std::collections::HashSet;

    fn graph(n_frames: usize, per_frame: usize) -> PatchGraph {
        let k = Intrinsics::new(200.0, 200.0, 160.0, 120.0).unwrap();
        let frames = (0..n_frames)
            .map(|i| {
                let gt = Pose::from_translation(Vector3::new(0.1 * i as f64, 0.0, 0.0));
                Frame {
                    index: i,
                    pose: gt,
                    gt_pose: gt,
                }
            })
            .collect();
        let mut patches = Vec::new();
        for i in 0..n_frames {
            for m in 0..per_frame {
                patches.push(Patch {
                    k: patches.len(),
                    i,
                    center: Vector2::new(100.0 + 10.0 * m as f64, 80.0 + 7.0 * m as f64),
                    depth: 4.0,
                    gt_depth: 4.0,
                });
            }
        }
        PatchGraph::new(k, frames, patches)
    }

    #[test]
    fn build_edges_enumerates_neighbors() {
        let mut g = graph(3, 0);
        g.patches.push(Patch {
            k: 0,
            i: 1,
            center: Vector2::new(10.0, 10.0),
            depth: 2.0,
            gt_depth: 2.0,
        });
        let g = g.build_edges(1);
        let js: Vec<_> = g.edges.iter().map(|e| e.j).collect();
        assert_eq!(js, vec![0, 2]);
        assert!(graph(3, 2).build_edges(0).edges.is_empty());
    }

    #[test]
    fn build_edges_counts_full_radius() {
        let (n, m) = (5, 3);
        let g = graph(n, m).build_edges(n + 2);
        assert_eq!(g.edges.len(), m * n * (n - 1));
    }

    #[test]
    fn build_edges_is_idempotent() {
        let g = graph(6, 2).build_edges(2);
        let mut h = g.clone();
        h.edges[0].target = Vector2::new(1.0, 2.0);
        assert_eq!(g.build_edges(2), g);
        assert_eq!(h.build_edges(2), h);
    }

    #[test]
    fn gt_targets_identity_poses_and_manual_recomputation() {
        let mut g = graph(3, 2);
        for f in &mut g.frames {
            f.gt_pose = Pose::identity();
        }
        let g = g.build_edges(2).gt_targets();
        for e in &g.edges {
            assert!((e.gt_target.unwrap() - g.patches[e.k].center).norm() < 1e-9);
        }

        let h = graph(4, 3).build_edges(3).gt_targets();
        for e in &h.edges {
            let p = &h.patches[e.k];
            let t = reproject(
                &p.center,
                p.gt_depth,
                &h.frames[p.i].gt_pose,
                &h.frames[e.j].gt_pose,
                &h.intrinsics,
                DEFAULT_Z_MIN,
            )
            .unwrap();
            assert_eq!(e.gt_target.unwrap(), t);
        }
    }

    #[test]
    fn gt_targets_drops_behind_camera_edges() {
        let mut g = graph(2, 2);
        // frame 1 sits 10 m further along the viewing direction: patch depths
        // of 4 m end up behind it
        g.frames[1].gt_pose = Pose::from_translation(Vector3::new(0.0, 0.0, -10.0));
        g.patches[0].gt_depth = 20.0;
        let g = g.build_edges(1);
        let before = g.edges.len();
        let g = g.gt_targets();
        // patch 0 (depth 20) stays visible; patch 1 (depth 4) does not
        assert_eq!(g.edges.len(), before - 1);
    }

    #[test]
    fn window_full_is_identity() {
        let g = graph(5, 2).build_edges(2).gt_targets();
        assert_eq!(g.window(0, 5).unwrap(), g);
        assert!(matches!(g.window(3, 3), Err(Error::EmptyWindow { .. })));
        assert!(g.window(0, 0).is_err());
    }

    #[test]
    fn window_keeps_only_intra_window_edges() {
        let g = graph(15, 2).build_edges(3);
        let (w, map) = g.window_with_map(0, 8).unwrap();
        assert_eq!(w.frames.len(), 8);
        w.validate().unwrap();
        for (n, e) in w.edges.iter().enumerate() {
            let orig = &g.edges[map.edges[n]];
            assert!(orig.j < 8 && g.patches[orig.k].i < 8);
            assert_eq!(e.j, orig.j);
        }
        let expected = g
            .edges
            .iter()
            .filter(|e| e.j < 8 && g.patches[e.k].i < 8)
            .count();
        assert_eq!(w.edges.len(), expected);
    }

    #[test]
    fn disjoint_windows_partition_co_windowed_edges() {
        let g = graph(12, 2).build_edges(3);
        let mut seen = HashSet::new();
        for first in [0, 4, 8] {
            let (_, map) = g.window_with_map(first, 4).unwrap();
            for e in map.edges {
                assert!(seen.insert(e));
            }
        }
        let co: HashSet<usize> = g
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| g.patches[e.k].i / 4 == e.j / 4)
            .map(|(n, _)| n)
            .collect();
        assert_eq!(seen, co);
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let mut g = graph(4, 3).build_edges(2).gt_targets();
        for (n, f) in g.frames.iter_mut().enumerate() {
            f.pose = Pose::exp(&Twist::new(0.1, 0.2 / 3.0, 0.3, 0.01 * n as f64, 0.02, 1.0 / 7.0));
        }
        for (n, e) in g.edges.iter_mut().enumerate() {
            e.target += Vector2::new(0.1 * n as f64, 1.0 / 3.0);
            e.weight = Vector2::new(0.3, 1.0 / (n as f64 + 1.0));
        }
        let s = g.to_json().unwrap();
        assert!(s.contains("\"version\": \"ba-grad/1\""));
        let h = PatchGraph::from_json(&s).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn from_json_rejects_bad_references() {
        let mut g = graph(2, 1).build_edges(1);
        g.edges[0].j = 9;
        let s = serde_json::to_string(&g).unwrap();
        assert!(PatchGraph::from_json(&s).is_err());
    }
}

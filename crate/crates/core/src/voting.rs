//! Lifting 2D object-ID maps onto a 3D point cloud.
//!
//! Three strategies: majority over projected votes, a seeded draw from the
//! per-point vote distribution, and majority over structure-from-motion track
//! observations (no re-projection). Projection performs no occlusion test, so
//! occluded points can collect votes for whatever lies in front of them.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scene::{Camera, IdMap, LabeledPointCloud};

/// Minimum camera-space depth for a point to count as in front of the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

/// Per-point vote counts keyed by object ID. Ordered so iteration (and
/// therefore tie-breaking and sampling) is deterministic.
pub type VoteTally = BTreeMap<u32, u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub view: u32,
    pub x: u32,
    pub y: u32,
}

/// For every point, the pixels where it was observed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackCorrespondences {
    pub tracks: Vec<Vec<TrackObservation>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VotingStrategy {
    Majority,
    Probability,
    Correspondence,
}

impl std::str::FromStr for VotingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(Self::Majority),
            "probability" => Ok(Self::Probability),
            "correspondence" => Ok(Self::Correspondence),
            other => Err(Error::Config(format!("unknown voting strategy `{other}`"))),
        }
    }
}

/// Pinhole projection rounded to the nearest pixel. `None` when the point is
/// behind the camera or lands outside the image.
pub fn project_point(p: &Vector3<f64>, camera: &Camera) -> Option<(u32, u32)> {
    let pc = camera.world_to_camera(p);
    if !(pc.z > MIN_PROJECTION_DEPTH) {
        return None;
    }
    let u = (camera.fx * pc.x / pc.z + camera.cx).round();
    let v = (camera.fy * pc.y / pc.z + camera.cy).round();
    if u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64 {
        Some((u as u32, v as u32))
    } else {
        None
    }
}

fn check_views(id_maps: &[IdMap], cameras: &[Camera]) -> Result<()> {
    if id_maps.len() != cameras.len() {
        return Err(Error::Config(format!(
            "{} id maps but {} cameras",
            id_maps.len(),
            cameras.len()
        )));
    }
    for (j, (map, cam)) in id_maps.iter().zip(cameras).enumerate() {
        cam.validate()?;
        if map.width != cam.width || map.height != cam.height {
            return Err(Error::Config(format!(
                "view {j}: id map is {}x{} but camera is {}x{}",
                map.width, map.height, cam.width, cam.height
            )));
        }
    }
    Ok(())
}

pub fn gather_votes(
    cloud: &LabeledPointCloud,
    id_maps: &[IdMap],
    cameras: &[Camera],
) -> Result<Vec<VoteTally>> {
    check_views(id_maps, cameras)?;
    Ok(cloud
        .points
        .par_iter()
        .map(|pt| {
            let p = Vector3::from(pt.position);
            let mut tally = VoteTally::new();
            for (map, cam) in id_maps.iter().zip(cameras) {
                if let Some((x, y)) = project_point(&p, cam) {
                    *tally.entry(map.get(x, y)).or_insert(0) += 1;
                }
            }
            tally
        })
        .collect())
}

/// Most frequent ID; ties go to the smallest ID, an empty tally yields 0.
pub fn majority_vote(tally: &VoteTally) -> u32 {
    let mut best: Option<(u32, u32)> = None;
    for (&id, &count) in tally {
        // Ascending key order, so strict `>` keeps the smallest ID on ties.
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((id, count));
        }
    }
    best.map_or(0, |(id, _)| id)
}

/// Draws an ID with probability proportional to its vote count.
///
/// The draw is `r = (next_u64 · total) >> 64` from a [`SplitMix64`] seeded
/// with `seed`, then the first ID (ascending) whose cumulative count exceeds
/// `r`.
pub fn probability_vote(tally: &VoteTally, seed: u64) -> u32 {
    let total: u64 = tally.values().map(|&c| c as u64).sum();
    if total == 0 {
        return 0;
    }
    let mut rng = SplitMix64::new(seed);
    let r = rng.below(total);
    let mut cumulative = 0u64;
    for (&id, &count) in tally {
        cumulative += count as u64;
        if r < cumulative {
            return id;
        }
    }
    unreachable!("r < total by construction")
}

/// Seed for point `index` under a run-level `seed`.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::new(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

pub fn correspondence_vote(
    cloud: &LabeledPointCloud,
    tracks: &TrackCorrespondences,
    id_maps: &[IdMap],
) -> Result<Vec<u32>> {
    if tracks.tracks.len() != cloud.len() {
        return Err(Error::Config(format!(
            "{} tracks for {} points",
            tracks.tracks.len(),
            cloud.len()
        )));
    }
    tracks
        .tracks
        .par_iter()
        .enumerate()
        .map(|(i, obs)| {
            let mut tally = VoteTally::new();
            for o in obs {
                let map = id_maps.get(o.view as usize).ok_or_else(|| {
                    Error::Data(format!("point {i}: track references missing view {}", o.view))
                })?;
                if o.x >= map.width || o.y >= map.height {
                    return Err(Error::Data(format!(
                        "point {i}: pixel ({}, {}) outside view {} ({}x{})",
                        o.x, o.y, o.view, map.width, map.height
                    )));
                }
                *tally.entry(map.get(o.x, o.y)).or_insert(0) += 1;
            }
            Ok(majority_vote(&tally))
        })
        .collect()
}

/// Strategy-specific inputs for [`assign_ids`].
#[derive(Clone, Copy, Debug, Default)]
pub struct VotingInputs<'a> {
    pub id_maps: &'a [IdMap],
    pub cameras: &'a [Camera],
    pub tracks: Option<&'a TrackCorrespondences>,
    pub seed: u64,
}

/// New cloud with IDs assigned by `strategy`; positions and colors are copied
/// bit-exactly.
pub fn assign_ids(
    cloud: &LabeledPointCloud,
    strategy: VotingStrategy,
    inputs: VotingInputs<'_>,
) -> Result<LabeledPointCloud> {
    let ids = match strategy {
        VotingStrategy::Majority => gather_votes(cloud, inputs.id_maps, inputs.cameras)?
            .iter()
            .map(majority_vote)
            .collect::<Vec<_>>(),
        VotingStrategy::Probability => gather_votes(cloud, inputs.id_maps, inputs.cameras)?
            .iter()
            .enumerate()
            .map(|(i, t)| probability_vote(t, point_seed(inputs.seed, i)))
            .collect(),
        VotingStrategy::Correspondence => {
            let tracks = inputs.tracks.ok_or_else(|| {
                Error::Config("correspondence voting requires track correspondences".into())
            })?;
            correspondence_vote(cloud, tracks, inputs.id_maps)?
        }
    };
    cloud.with_ids(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LabeledPoint;
    use proptest::prelude::*;

    fn axis_camera(w: u32, h: u32) -> Camera {
        Camera {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: w,
            height: h,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera(64, 64);
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, 1.0), &cam), Some((32, 32)));
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, -1.0), &cam), None);
        // lands at (-3, 10)
        let p = Vector3::new(-35.0 / 50.0, -22.0 / 50.0, 1.0);
        assert_eq!(project_point(&p, &cam), None);
    }

    fn tally(pairs: &[(u32, u32)]) -> VoteTally {
        pairs.iter().copied().collect()
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&tally(&[(1, 2), (2, 1)])), 1);
        assert_eq!(majority_vote(&VoteTally::new()), 0);
        assert_eq!(majority_vote(&tally(&[(3, 5), (7, 5)])), 3);
    }

    #[test]
    fn gather_counts_visible_views() {
        // Camera j sees the point at pixel (32, 32) in views 0..3; view 3 is behind.
        let mut cams = vec![axis_camera(64, 64); 4];
        cams[3].rotation = [0.0, 1.0, 0.0, 0.0]; // 180 deg about x, point ends up behind
        let mut maps: Vec<IdMap> = Vec::new();
        for id in [1, 1, 2, 5] {
            maps.push(IdMap::filled(64, 64, id));
        }
        let cloud = LabeledPointCloud::new(vec![LabeledPoint {
            position: [0.0, 0.0, 1.0],
            color: [0.0; 3],
            object_id: 0,
        }]);
        let t = gather_votes(&cloud, &maps, &cams).unwrap();
        assert_eq!(t[0], tally(&[(1, 2), (2, 1)]));

        let behind = LabeledPointCloud::new(vec![LabeledPoint {
            position: [0.0, 0.0, -5.0],
            color: [0.0; 3],
            object_id: 0,
        }]);
        let t = gather_votes(&behind, &maps[..3], &cams[..3]).unwrap();
        assert!(t[0].is_empty());

        assert!(matches!(gather_votes(&cloud, &maps[..2], &cams), Err(Error::Config(_))));
    }

    #[test]
    fn probability_examples() {
        for seed in 0..50 {
            assert_eq!(probability_vote(&tally(&[(5, 10)]), seed), 5);
        }
        assert_eq!(probability_vote(&VoteTally::new(), 9), 0);
        let t = tally(&[(1, 3), (2, 1)]);
        let draws = 100_000;
        let ones = (0..draws).filter(|&s| probability_vote(&t, s) == 1).count();
        let freq = ones as f64 / draws as f64;
        assert!((0.74..=0.76).contains(&freq), "freq {freq}");
    }

    #[test]
    fn correspondence_examples() {
        let maps = vec![IdMap::filled(8, 8, 2); 3];
        let cloud = LabeledPointCloud::new(vec![
            LabeledPoint { position: [0.0; 3], color: [0.0; 3], object_id: 0 };
            2
        ]);
        let tracks = TrackCorrespondences {
            tracks: vec![
                (0..3).map(|v| TrackObservation { view: v, x: 1, y: 2 }).collect(),
                vec![],
            ],
        };
        assert_eq!(correspondence_vote(&cloud, &tracks, &maps).unwrap(), vec![2, 0]);

        let bad = TrackCorrespondences {
            tracks: vec![vec![TrackObservation { view: 1, x: 8, y: 0 }], vec![]],
        };
        let err = correspondence_vote(&cloud, &bad, &maps).unwrap_err().to_string();
        assert!(err.contains("point 0") && err.contains("view 1"), "{err}");
    }

    #[test]
    fn assign_requires_tracks_for_correspondence() {
        let cloud = LabeledPointCloud::new(vec![]);
        let r = assign_ids(&cloud, VotingStrategy::Correspondence, VotingInputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn majority_has_max_count(pairs in proptest::collection::btree_map(0u32..20, 1u32..10, 0..8)) {
            let id = majority_vote(&pairs);
            if pairs.is_empty() {
                prop_assert_eq!(id, 0);
            } else {
                let c = pairs[&id];
                prop_assert!(pairs.values().all(|&o| o <= c));
                prop_assert!(pairs.iter().all(|(&k, &o)| o < c || k >= id));
            }
        }

        #[test]
        fn probability_support_is_key_set(
            pairs in proptest::collection::btree_map(0u32..20, 1u32..10, 0..8),
            seed in any::<u64>(),
        ) {
            let id = probability_vote(&pairs, seed);
            if pairs.is_empty() {
                prop_assert_eq!(id, 0);
            } else {
                prop_assert!(pairs.contains_key(&id));
            }
            prop_assert_eq!(id, probability_vote(&pairs, seed));
        }
    }
}

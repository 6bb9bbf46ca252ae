//! Binary descriptors and projection-guided keypoint matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::Vec3;

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Descriptor(pub [u8; 32]);

impl Descriptor {
    pub const LEN: usize = 32;

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    /// Radians.
    pub angle: f64,
    pub octave: u8,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub hamming_max: u32,
    /// Best must be below `ratio * second_best`.
    pub ratio: f64,
    pub radius_px: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { hamming_max: 50, ratio: 0.8, radius_px: 15.0 }
    }
}

/// A 3D point offered for matching.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: u64,
    pub position: Vec3,
    pub descriptor: &'a Descriptor,
}

/// Bucketed keypoint lookup by pixel position.
pub struct KeypointIndex<'a> {
    keypoints: &'a [Keypoint],
    bucket: f64,
    buckets: BTreeMap<(i64, i64), Vec<usize>>,
}

impl<'a> KeypointIndex<'a> {
    pub fn new(keypoints: &'a [Keypoint], bucket: f64) -> Self {
        let bucket = bucket.max(1.0);
        let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, kp) in keypoints.iter().enumerate() {
            buckets.entry(Self::key(kp.u, kp.v, bucket)).or_default().push(i);
        }
        Self { keypoints, bucket, buckets }
    }

    fn key(u: f64, v: f64, bucket: f64) -> (i64, i64) {
        ((u / bucket).floor() as i64, (v / bucket).floor() as i64)
    }

    /// Indices of keypoints within `radius` of `(u, v)`, ascending.
    pub fn within(&self, u: f64, v: f64, radius: f64) -> Vec<usize> {
        let (lo_u, lo_v) = Self::key(u - radius, v - radius, self.bucket);
        let (hi_u, hi_v) = Self::key(u + radius, v + radius, self.bucket);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for bu in lo_u..=hi_u {
            for bv in lo_v..=hi_v {
                if let Some(list) = self.buckets.get(&(bu, bv)) {
                    for &i in list {
                        let kp = &self.keypoints[i];
                        let (du, dv) = (kp.u - u, kp.v - v);
                        if du * du + dv * dv <= r2 {
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Closest keypoint within `radius`, ties by index.
    pub fn nearest(&self, u: f64, v: f64, radius: f64) -> Option<usize> {
        self.within(u, v, radius).into_iter().min_by(|&a, &b| {
            let da = (self.keypoints[a].u - u).powi(2) + (self.keypoints[a].v - v).powi(2);
            let db = (self.keypoints[b].u - u).powi(2) + (self.keypoints[b].v - v).powi(2);
            da.total_cmp(&db).then(a.cmp(&b))
        })
    }
}

/// One accepted correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub id: u64,
    pub keypoint: usize,
    pub distance: u32,
}

/// Projects candidates with `pose` and pairs each with the best keypoint in a
/// search radius. A keypoint claimed by several candidates goes to the lowest
/// Hamming distance (then lowest id). Result is sorted by keypoint index.
pub fn match_by_projection<'a>(
    k: &CameraIntrinsics,
    pose: &Pose,
    candidates: impl IntoIterator<Item = Candidate<'a>>,
    keypoints: &[Keypoint],
    params: &MatchParams,
) -> Vec<Match> {
    let index = KeypointIndex::new(keypoints, params.radius_px.max(4.0));
    let mut claims: BTreeMap<usize, Match> = BTreeMap::new();
    for cand in candidates {
        let Some(px) = project(k, pose, &cand.position) else { continue };
        if !k.contains(px.x, px.y) {
            continue;
        }
        let mut best: Option<(u32, usize)> = None;
        let mut second: Option<u32> = None;
        for i in index.within(px.x, px.y, params.radius_px) {
            let d = cand.descriptor.hamming(&keypoints[i].descriptor);
            match best {
                Some((bd, _)) if d >= bd => {
                    if second.map_or(true, |s| d < s) {
                        second = Some(d);
                    }
                }
                _ => {
                    second = best.map(|(bd, _)| bd);
                    best = Some((d, i));
                }
            }
        }
        let Some((d, i)) = best else { continue };
        if d > params.hamming_max {
            continue;
        }
        if let Some(s) = second {
            if (d as f64) >= params.ratio * s as f64 {
                continue;
            }
        }
        let m = Match { id: cand.id, keypoint: i, distance: d };
        match claims.get(&i) {
            Some(prev) if (prev.distance, prev.id) <= (d, cand.id) => {}
            _ => {
                claims.insert(i, m);
            }
        }
    }
    claims.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_desc(rng: &mut impl Rng) -> Descriptor {
        let mut d = [0u8; 32];
        rng.fill(&mut d);
        Descriptor(d)
    }

    #[test]
    fn hamming_counts_bits() {
        let a = Descriptor([0; 32]);
        let mut b = [0u8; 32];
        b[0] = 0b1011;
        b[31] = 0xff;
        assert_eq!(a.hamming(&Descriptor(b)), 11);
        assert_eq!(a.hamming(&a), 0);
    }

    #[test]
    fn projection_matching_recovers_identity() {
        let k = CameraIntrinsics::vga();
        let pose = Pose::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = Vec::new();
        let mut kps = Vec::new();
        for i in 0..200u64 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.7..0.7), rng.gen_range(2.0..4.0));
            let d = random_desc(&mut rng);
            let px = project(&k, &pose, &p).unwrap();
            kps.push(Keypoint { u: px.x + 1.0, v: px.y - 0.5, angle: 0.0, octave: 0, descriptor: d });
            points.push((i, p, d));
        }
        let cands = points.iter().map(|(id, p, d)| Candidate { id: *id, position: *p, descriptor: d });
        let matches = match_by_projection(&k, &pose, cands, &kps, &MatchParams::default());
        assert_eq!(matches.len(), 200);
        assert!(matches.iter().all(|m| m.id as usize == m.keypoint && m.distance == 0));
    }

    #[test]
    fn descriptor_mismatch_rejected() {
        let k = CameraIntrinsics::vga();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Vec3::new(0.0, 0.0, 2.0);
        let d = random_desc(&mut rng);
        let kps = vec![Keypoint { u: 320.0, v: 240.0, angle: 0.0, octave: 0, descriptor: random_desc(&mut rng) }];
        let cands = [Candidate { id: 1, position: p, descriptor: &d }];
        assert!(match_by_projection(&k, &Pose::identity(), cands, &kps, &MatchParams::default()).is_empty());
    }

    #[test]
    fn nearest_keypoint() {
        let d = Descriptor([0; 32]);
        let kps = vec![
            Keypoint { u: 10.0, v: 10.0, angle: 0.0, octave: 0, descriptor: d },
            Keypoint { u: 11.5, v: 10.0, angle: 0.0, octave: 0, descriptor: d },
        ];
        let idx = KeypointIndex::new(&kps, 8.0);
        assert_eq!(idx.nearest(11.0, 10.0, 2.0), Some(1));
        assert_eq!(idx.nearest(30.0, 10.0, 2.0), None);
    }
}

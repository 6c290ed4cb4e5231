//! Demonstration synthesis and flow supervision.
//!
//! Episodes come from the scripted expert. Each one is split into atomic
//! segments on stable gripper transitions, and every segment yields
//! goal-oriented flow targets: keypoint positions at `K` keyframes warped
//! toward the segment end.

pub mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::closedloop::expert::{expert_done, scripted_expert, DropInjector};
use crate::closedloop::world::{
    keypoint_offsets, keypoints_at, world_step, TaskSpec, WorldConfig, OBS_DIM, PROPRIO_DIM,
};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowTensor};

pub use dataset::Dataset;

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: usize,
    pub gripper_signal: Vec<f64>,
    pub binary_state: Vec<bool>,
    /// `tracks[t][n]` is keypoint `n` at step `t`.
    pub tracks: Vec<Vec<[f64; 3]>>,
    pub observations: Vec<[f64; OBS_DIM]>,
    /// `[dx, dy, dz, gripper]` taken at each step.
    pub actions: Vec<[f64; 4]>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.len())
    }

    pub fn proprioception(&self, t: usize) -> [f64; PROPRIO_DIM] {
        let o = &self.observations[t];
        [o[0], o[1], o[2], o[3]]
    }

    /// The expert's `h` actions from step `t`, padded past the end with a
    /// zero displacement and the final gripper command.
    pub fn action_chunk(&self, t: usize, h: usize) -> ActionChunk {
        let last = *self.actions.last().expect("non-empty episode");
        let mut deltas = Vec::with_capacity(h);
        let mut gripper = Vec::with_capacity(h);
        for i in 0..h {
            match self.actions.get(t + i) {
                Some(a) => {
                    deltas.push([a[0], a[1], a[2]]);
                    gripper.push(a[3]);
                }
                None => {
                    deltas.push([0.0; 3]);
                    gripper.push(last[3]);
                }
            }
        }
        ActionChunk { deltas, gripper }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub n_keypoints: usize,
    /// Probability of flipping the recorded gripper signal at any one step.
    pub jitter_rate: f64,
    pub max_steps: usize,
    /// Steps recorded after the expert reaches its final pose.
    pub hold_steps: usize,
    pub world: WorldConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 16,
            jitter_rate: 0.02,
            max_steps: 400,
            hold_steps: 4,
            world: WorldConfig::default(),
        }
    }
}

/// Rolls out the scripted expert and records observations, actions, the
/// gripper signal and exact keypoint tracks. Deterministic in `(task, seed)`.
pub fn gen_synthetic_episode(task: &TaskSpec, seed: u64, cfg: &EpisodeConfig) -> Result<Episode> {
    task.validate()?;
    cfg.world.validate()?;
    let offsets = keypoint_offsets(cfg.n_keypoints);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xe915);
    let mut state = task.reset(seed, &cfg.world);
    let mut inj = DropInjector::default();
    let mut ep = Episode {
        task_id: task.task_id,
        gripper_signal: Vec::new(),
        binary_state: Vec::new(),
        tracks: Vec::new(),
        observations: Vec::new(),
        actions: Vec::new(),
    };
    let mut hold = 0;
    for _ in 0..cfg.max_steps {
        let action = scripted_expert(&state, task, &cfg.world).map(q32);
        let mut g = if state.gripper_open { 0.0 } else { 1.0 };
        if cfg.jitter_rate > 0.0 && rng.random_bool(cfg.jitter_rate.min(1.0)) {
            g = 1.0 - g;
        }
        ep.gripper_signal.push(g);
        ep.tracks.push(
            keypoints_at(state.gripper_pos, &offsets)
                .into_iter()
                .map(|p| p.map(q32))
                .collect(),
        );
        ep.observations.push(state.observation().map(q32));
        ep.actions.push(action);
        if expert_done(&state, task) {
            hold += 1;
            if hold > cfg.hold_steps {
                break;
            }
        }
        state = world_step(&state, action, &cfg.world)?;
        inj.after_step(&mut state, task, &cfg.world);
    }
    ep.binary_state = binarize_gripper(&ep.gripper_signal);
    Ok(ep)
}

/// `b_t = g_t > 0`.
pub fn binarize_gripper(g: &[f64]) -> Vec<bool> {
    g.iter().map(|&v| v > 0.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtomicSegment {
    pub start: usize,
    pub end: usize,
    pub gripper_state: u8,
}

impl AtomicSegment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Splits a binarized gripper series into atomic segments.
///
/// A transition `b_t != b_{t+1}` away from the current segment's state ends
/// the segment at `t` only if the new value holds for `persistence` steps
/// starting at `t + 1`; single-step blips are left in place. Segments
/// shorter than `min_len` are merged into their predecessor (the first one
/// into its successor) and same-state neighbours are coalesced, so the
/// result always partitions `[0, len - 1]`.
pub fn segment_atomic(b: &[bool], persistence: usize, min_len: usize) -> Vec<AtomicSegment> {
    if b.is_empty() {
        return Vec::new();
    }
    let persistence = persistence.max(1);
    let mut raw = Vec::new();
    let mut cur = b[0];
    let mut start = 0;
    for t in 0..b.len() - 1 {
        let next = b[t + 1];
        if b[t] == next || next == cur {
            continue;
        }
        let window = &b[t + 1..];
        if window.len() >= persistence && window[..persistence].iter().all(|&v| v == next) {
            raw.push(AtomicSegment {
                start,
                end: t,
                gripper_state: cur as u8,
            });
            start = t + 1;
            cur = next;
        }
    }
    raw.push(AtomicSegment {
        start,
        end: b.len() - 1,
        gripper_state: cur as u8,
    });

    let mut merged: Vec<AtomicSegment> = Vec::new();
    let mut carry: Option<usize> = None;
    let last_state = raw[raw.len() - 1].gripper_state;
    for seg in raw {
        let seg = match carry.take() {
            Some(s) => AtomicSegment { start: s, ..seg },
            None => seg,
        };
        if seg.len() < min_len {
            if let Some(prev) = merged.last_mut() {
                prev.end = seg.end;
            } else {
                carry = Some(seg.start);
            }
            continue;
        }
        match merged.last_mut() {
            Some(prev) if prev.gripper_state == seg.gripper_state => prev.end = seg.end,
            _ => merged.push(seg),
        }
    }
    if let Some(s) = carry {
        // the series is shorter than min_len: everything merged forward
        merged.push(AtomicSegment {
            start: s,
            end: b.len() - 1,
            gripper_state: last_state,
        });
    }
    merged
}

/// Goal-warped keyframes `t_k = floor(s + (k / (K-1))^gamma * (e - s))` with
/// `s = start`, `e = segment.end`.
pub fn resample_keyframes(
    segment: &AtomicSegment,
    start: usize,
    k: usize,
    gamma: f64,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K = {k} < 2")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma = {gamma} must be positive"
        )));
    }
    if start < segment.start || start > segment.end {
        return Err(Error::InvalidArgument(format!(
            "start {start} outside segment [{}, {}]",
            segment.start, segment.end
        )));
    }
    let span = (segment.end - start) as f64;
    Ok((0..k)
        .map(|i| {
            let u = (i as f64 / (k - 1) as f64).powf(gamma);
            // exact grid points such as (1/3)^3 * 27 land just below the integer
            let t = (start as f64 + u * span + 1e-9).floor() as usize;
            t.min(segment.end)
        })
        .collect())
}

/// `values[k][n] = tracks[t_k][n]`, unit weights.
pub fn extract_flow_target(episode: &Episode, keyframes: &[usize]) -> Result<FlowTensor> {
    let n = episode.keypoints();
    let mut values = Vec::with_capacity(keyframes.len() * n * 3);
    for &t in keyframes {
        let frame = episode.tracks.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "keyframe {t} outside episode of length {}",
                episode.len()
            ))
        })?;
        for p in frame {
            values.extend_from_slice(p);
        }
    }
    FlowTensor::with_unit_weights(keyframes.len(), n, values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub static_threshold: f64,
    pub outlier_mad_k: f64,
    pub delta_max: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            static_threshold: 0.02,
            outlier_mad_k: 5.0,
            delta_max: 0.1,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Three-stage track filter. Returns a keep-mask over keypoints.
///
/// 1. drop tracks whose path length is below `static_threshold`;
/// 2. drop tracks whose path length exceeds `median + outlier_mad_k * MAD`
///    over the stage-1 survivors (equality keeps the track);
/// 3. drop tracks with any single-step displacement above `delta_max`.
pub fn filter_tracks(tracks: &[Vec<[f64; 3]>], cfg: &FilterConfig) -> Vec<bool> {
    let n = tracks.first().map_or(0, |t| t.len());
    let mut path = vec![0.0; n];
    let mut max_step = vec![0.0f64; n];
    for w in tracks.windows(2) {
        for i in 0..n {
            let a = w[0][i];
            let b = w[1][i];
            let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            path[i] += d;
            max_step[i] = max_step[i].max(d);
        }
    }
    let mut keep: Vec<bool> = path.iter().map(|&p| p >= cfg.static_threshold).collect();
    let mut survivors: Vec<f64> = (0..n).filter(|&i| keep[i]).map(|i| path[i]).collect();
    if !survivors.is_empty() {
        let med = median(&mut survivors);
        let mut dev: Vec<f64> = survivors.iter().map(|p| (p - med).abs()).collect();
        let mad = median(&mut dev);
        let limit = med + cfg.outlier_mad_k * mad;
        for i in 0..n {
            if keep[i] && path[i] > limit {
                keep[i] = false;
            }
        }
    }
    for i in 0..n {
        if keep[i] && max_step[i] > cfg.delta_max {
            keep[i] = false;
        }
    }
    keep
}

/// Policy supervision attached to a pair: the state `offset` steps after the
/// condition frame and the expert's next chunk from there. Offsets beyond
/// zero train the executor to follow a plan made earlier in the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub offset: usize,
    pub observation: [f64; OBS_DIM],
    pub proprio: [f64; PROPRIO_DIM],
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub condition_frame: usize,
    pub observation: [f64; OBS_DIM],
    pub task_id: usize,
    pub query_points: Option<Vec<[f64; 2]>>,
    pub target: FlowTensor,
    pub segment: AtomicSegment,
    pub policy_samples: Vec<PolicySample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub k: usize,
    pub gamma: f64,
    pub pairs_per_segment: usize,
    pub persistence: usize,
    pub min_len: usize,
    pub filter: FilterConfig,
    /// Action chunk horizon.
    pub horizon: usize,
    /// Policy samples per pair, spaced one chunk apart.
    pub stale_chunks: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            k: 8,
            gamma: 2.0,
            pairs_per_segment: 4,
            persistence: 3,
            min_len: 4,
            filter: FilterConfig::default(),
            horizon: 20,
            stale_chunks: 4,
        }
    }
}

/// Segments an episode and emits `pairs_per_segment` flow targets per
/// segment, each conditioned on a frame drawn uniformly from
/// `[s_i, max(s_i, e_i - K)]`. Tracks rejected by [`filter_tracks`] get zero
/// weight.
pub fn build_training_pairs(
    episode: &Episode,
    cfg: &PairConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if episode.len() < 2 {
        return Err(Error::InvalidArgument(
            "episode shorter than 2 steps".into(),
        ));
    }
    let segments = segment_atomic(&episode.binary_state, cfg.persistence, cfg.min_len);
    let keep = filter_tracks(&episode.tracks, &cfg.filter);
    let n = episode.keypoints();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed);
    let mut pairs = Vec::with_capacity(segments.len() * cfg.pairs_per_segment);
    for seg in &segments {
        let hi = seg.start.max(seg.end.saturating_sub(cfg.k));
        for _ in 0..cfg.pairs_per_segment {
            let ts = rng.random_range(seg.start..=hi);
            let keyframes = resample_keyframes(seg, ts, cfg.k, cfg.gamma)?;
            let mut target = extract_flow_target(episode, &keyframes)?;
            if keep.iter().any(|k| !k) {
                let weights = (0..cfg.k * n)
                    .map(|i| if keep[i % n] { 1.0 } else { 0.0 })
                    .collect();
                target = target.with_weights(weights)?;
            }
            let query = episode.tracks[ts].iter().map(|p| [p[0], p[1]]).collect();
            let policy_samples = (0..cfg.stale_chunks.max(1))
                .map(|j| j * cfg.horizon)
                .filter(|&off| off == 0 || ts + off <= seg.end)
                .map(|off| PolicySample {
                    offset: off,
                    observation: episode.observations[ts + off],
                    proprio: episode.proprioception(ts + off),
                    chunk: episode.action_chunk(ts + off, cfg.horizon),
                })
                .collect();
            pairs.push(TrainingPair {
                condition_frame: ts,
                observation: episode.observations[ts],
                task_id: episode.task_id,
                query_points: Some(query),
                target,
                segment: *seg,
                policy_samples,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenConfig {
    pub episode: EpisodeConfig,
    pub pairs: PairConfig,
    /// Fraction of episodes in which the expert loses its grasp mid-transport.
    pub drop_rate: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            pairs: PairConfig::default(),
            drop_rate: 0.0,
        }
    }
}

/// Per-episode seed derived from the dataset seed.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(index.wrapping_mul(0x2545_f491_4f6c_dd1d))
        ^ 0xda7a
}

/// Generates `episodes` demonstrations, cycling through `tasks`, and
/// packages their pairs with normalization statistics.
pub fn generate_dataset(
    tasks: &[TaskSpec],
    episodes: usize,
    seed: u64,
    cfg: &DatagenConfig,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::NoEpisodes);
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd209);
    let mut pairs = Vec::new();
    for e in 0..episodes {
        let mut task = tasks[e % tasks.len()].clone();
        if cfg.drop_rate > 0.0 && rng.random_bool(cfg.drop_rate.min(1.0)) {
            task = task.with_drop(rng.random_range(5..=30));
        }
        let es = episode_seed(seed, e as u64);
        let ep = gen_synthetic_episode(&task, es, &cfg.episode)?;
        pairs.extend(build_training_pairs(&ep, &cfg.pairs, es)?);
    }
    Dataset::from_pairs(pairs, cfg.pairs.horizon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: usize, end: usize, s: u8) -> AtomicSegment {
        AtomicSegment {
            start,
            end,
            gripper_state: s,
        }
    }

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(
            binarize_gripper(&[-1.0, 0.0, 0.5]),
            vec![false, false, true]
        );
        assert_eq!(binarize_gripper(&[0.0; 4]), vec![false; 4]);
        assert_eq!(
            binarize_gripper(&[0.2, 0.0001, -0.0001]),
            vec![true, true, false]
        );
    }

    #[test]
    fn segment_examples() {
        assert_eq!(
            segment_atomic(&bits(&[0, 0, 0, 1, 1, 1, 0, 0, 0]), 2, 2),
            vec![seg(0, 2, 0), seg(3, 5, 1), seg(6, 8, 0)]
        );
        assert_eq!(
            segment_atomic(&bits(&[0, 0, 1, 0, 0]), 2, 1),
            vec![seg(0, 4, 0)]
        );
        assert_eq!(segment_atomic(&bits(&[1; 7]), 3, 4), vec![seg(0, 6, 1)]);
    }

    #[test]
    fn short_first_segment_merges_forward() {
        // leading blip of 1 followed by a long run of 0
        let s = segment_atomic(&bits(&[1, 0, 0, 0, 0, 0]), 2, 3);
        assert_eq!(s, vec![seg(0, 5, 0)]);
    }

    #[test]
    fn resample_examples() {
        let s = seg(10, 50, 0);
        assert_eq!(
            resample_keyframes(&s, 10, 5, 2.0).unwrap(),
            vec![10, 12, 20, 32, 50]
        );
        assert_eq!(
            resample_keyframes(&seg(0, 10, 0), 0, 3, 1.0).unwrap(),
            vec![0, 5, 10]
        );
        assert_eq!(
            resample_keyframes(&seg(0, 10, 0), 10, 4, 2.0).unwrap(),
            vec![10; 4]
        );
        assert!(resample_keyframes(&seg(0, 10, 0), 11, 4, 2.0).is_err());
        assert!(resample_keyframes(&seg(0, 10, 0), 0, 1, 2.0).is_err());
        assert!(resample_keyframes(&seg(0, 10, 0), 0, 3, 0.0).is_err());
    }

    #[test]
    fn episode_is_deterministic_and_has_two_transitions() {
        let cfg = EpisodeConfig::default();
        let task = TaskSpec::pick_place();
        let a = gen_synthetic_episode(&task, 7, &cfg).unwrap();
        let b = gen_synthetic_episode(&task, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let segs = segment_atomic(&a.binary_state, 3, 4);
        assert_eq!(segs.len(), 3, "{segs:?}");
        assert_eq!(
            segs.iter().map(|s| s.gripper_state).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn tracks_are_rigid_offsets_of_the_gripper() {
        let cfg = EpisodeConfig::default();
        let ep = gen_synthetic_episode(&TaskSpec::pick_place(), 3, &cfg).unwrap();
        let offs = keypoint_offsets(cfg.n_keypoints);
        for (t, frame) in ep.tracks.iter().enumerate() {
            let g = &ep.observations[t];
            for (p, o) in frame.iter().zip(&offs) {
                for a in 0..3 {
                    assert!((p[a] - g[a] - o[a]).abs() < 1e-6, "step {t}");
                }
            }
        }
    }

    #[test]
    fn extract_endpoints_give_total_displacement() {
        let cfg = EpisodeConfig {
            jitter_rate: 0.0,
            ..Default::default()
        };
        let ep = gen_synthetic_episode(&TaskSpec::pick_place(), 11, &cfg).unwrap();
        let last = ep.len() - 1;
        let f = extract_flow_target(&ep, &[0, last]).unwrap();
        for n in 0..ep.keypoints() {
            let d0 = f.point(0, n);
            let d1 = f.point(1, n);
            for a in 0..3 {
                let disp = d1[a] - d0[a];
                let grip = ep.observations[last][a] - ep.observations[0][a];
                assert!((disp - grip).abs() < 1e-6);
            }
        }
        let same = extract_flow_target(&ep, &[0, 0]).unwrap();
        assert_eq!(same.point(0, 3), same.point(1, 3));
        assert!(same.weights().iter().all(|&w| w == 1.0));
        assert!(extract_flow_target(&ep, &[0, ep.len()]).is_err());
    }

    #[test]
    fn rigid_tracks_survive_filter() {
        let tracks: Vec<Vec<[f64; 3]>> = (0..11)
            .map(|t| vec![[t as f64 * 0.05, 0.0, 0.0]; 4])
            .collect();
        assert_eq!(
            filter_tracks(
                &tracks,
                &FilterConfig {
                    static_threshold: 0.02,
                    ..Default::default()
                }
            ),
            vec![true; 4]
        );
    }

    #[test]
    fn pairs_follow_segment_contract() {
        let cfg = PairConfig::default();
        let ep =
            gen_synthetic_episode(&TaskSpec::pick_place(), 5, &EpisodeConfig::default()).unwrap();
        let pairs = build_training_pairs(&ep, &cfg, 1).unwrap();
        let segs = segment_atomic(&ep.binary_state, cfg.persistence, cfg.min_len);
        assert_eq!(pairs.len(), segs.len() * cfg.pairs_per_segment);
        assert_eq!(pairs, build_training_pairs(&ep, &cfg, 1).unwrap());
        for p in &pairs {
            let s = p.segment;
            assert!(s.start <= p.condition_frame && p.condition_frame < s.end);
            for n in 0..ep.keypoints() {
                assert_eq!(p.target.point(cfg.k - 1, n), ep.tracks[s.end][n]);
                assert_eq!(p.target.point(0, n), ep.tracks[p.condition_frame][n]);
            }
            assert_eq!(p.policy_samples[0].offset, 0);
            assert_eq!(p.policy_samples[0].observation, p.observation);
        }
    }

    #[test]
    fn dataset_rejects_zero_episodes() {
        let err = generate_dataset(&[TaskSpec::pick_place()], 0, 1, &DatagenConfig::default())
            .unwrap_err();
        assert_eq!(err.to_string(), "no episodes");
    }
}

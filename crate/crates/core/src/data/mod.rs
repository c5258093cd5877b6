//! Profiling, slicing, captioning and shard persistence for oracle-world clips.

pub mod caption;
pub mod profile;
pub mod shard;
pub mod slice;

use serde::{Deserialize, Serialize};

pub use caption::{make_captions, motion_words, CaptionSet, DenseCaption, MOTION_BLACKLIST};
pub use profile::{filter_clip, profile_clip, DropReason, FilterAttributes, FilterDecision, FilterThresholds};
pub use shard::{read_shard, write_shard, ShardManifest};
pub use slice::{frame_difference, slice_clips};

use crate::error::{Error, Result};
use crate::geometry::trajectory::Trajectory;
use crate::world::render::{render, Frame};
use crate::world::spec::{apply_event, build_world, EventSpec, WorldSpec};

/// World event taking effect from `frame` onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub frame: usize,
    pub event: EventSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    #[serde(skip)]
    pub frames: Vec<Frame>,
    pub trajectory: Trajectory,
    pub attributes: FilterAttributes,
    pub captions: CaptionSet,
    pub world_seed: u64,
    /// Sorted by frame.
    pub events: Vec<TimedEvent>,
}

impl ClipRecord {
    /// World state in effect at `frame`.
    pub fn world_at(&self, frame: usize) -> WorldSpec {
        world_at(self.world_seed, &self.events, frame)
    }
}

fn world_at(seed: u64, events: &[TimedEvent], frame: usize) -> WorldSpec {
    let mut w = build_world(seed);
    for e in events.iter().filter(|e| e.frame <= frame) {
        // events were validated when the clip was made
        w = apply_event(&w, &e.event).expect("validated event");
    }
    w
}

/// Render a trajectory in the seeded world, then profile and caption it.
pub fn make_clip(
    world_seed: u64,
    mut events: Vec<TimedEvent>,
    trajectory: Trajectory,
    height: usize,
    width: usize,
) -> Result<ClipRecord> {
    events.sort_by_key(|e| e.frame);
    let mut w = build_world(world_seed);
    for e in &events {
        if e.frame >= trajectory.len() {
            return Err(Error::Precondition(format!("event at frame {} beyond clip", e.frame)));
        }
        w = apply_event(&w, &e.event)?;
    }
    let mut frames = Vec::with_capacity(trajectory.len());
    for (i, pose) in trajectory.poses.iter().enumerate() {
        frames.push(render(&world_at(world_seed, &events, i), pose, height, width)?);
    }
    let attributes = profile::profile_clip(&frames, &trajectory.timestamps)?;
    let mut clip = ClipRecord {
        frames,
        trajectory,
        attributes,
        captions: CaptionSet { narrative: String::new(), scene_static: String::new(), dense_temporal: Vec::new() },
        world_seed,
        events,
    };
    clip.captions = make_captions(&clip);
    Ok(clip)
}

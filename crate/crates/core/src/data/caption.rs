use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ClipRecord;
use crate::geometry::trajectory::Motion;
use crate::world::render::{hit_test, HitClass};
use crate::world::spec::{Color, TimeOfDay, WorldSpec};

/// Words that describe camera motion; the scene-static tier must avoid all of them.
pub const MOTION_BLACKLIST: [&str; 12] = [
    "moves", "pans", "turns", "forward", "approaches", "backward", "strafes", "rotates", "walks", "retreats",
    "looks", "camera",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseCaption {
    pub start_time: f64,
    pub end_time: f64,
    #[serde(rename = "Event")]
    pub event: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub narrative: String,
    pub scene_static: String,
    pub dense_temporal: Vec<DenseCaption>,
}

/// Lower-cased words of `text` that appear in the motion blacklist.
pub fn motion_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphabetic() && c != '-')
        .map(str::to_ascii_lowercase)
        .filter(|w| MOTION_BLACKLIST.contains(&w.as_str()))
        .collect()
}

const PALETTE_NAMES: [&str; 4] = ["grey", "sandy", "mossy", "slate"];

fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn color_counts(pillars: impl Iterator<Item = Color>) -> Vec<String> {
    let mut counts = BTreeMap::new();
    for c in pillars {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    counts.into_iter().map(|(c, n)| format!("{n} {}", c.name())).collect()
}

/// World contents only: inventory, floor, lighting, tint, spawned objects.
pub fn scene_static(world: &WorldSpec) -> String {
    let sky = match world.time_of_day {
        TimeOfDay::Day => "under a bright daytime sky",
        TimeOfDay::Night => "under a dark night sky",
    };
    let palette = PALETTE_NAMES[world.floor_palette as usize % PALETTE_NAMES.len()];
    let mut s = format!("A walled arena with a {palette} checkered floor {sky}.");
    let counts = color_counts(world.pillars.values().copied());
    if !counts.is_empty() {
        s.push_str(&format!(" {} pillars stand in the arena: {}.", world.pillars.len(), join_list(&counts)));
    }
    if world.tint != [1.0, 1.0, 1.0] {
        let [r, g, b] = world.tint;
        s.push_str(&format!(" The whole scene carries a color tint of ({r:.2}, {g:.2}, {b:.2})."));
    }
    for (cell, color) in &world.spawned {
        s.push_str(&format!(" A {} block sits at cell ({}, {}).", color.name(), cell.x, cell.z));
    }
    s
}

fn motion_phrase(m: &Motion) -> (String, String) {
    let side = |right: bool| if right { "right" } else { "left" };
    match *m {
        Motion::Still => ("stationary view".into(), "holds a fixed view".into()),
        Motion::Rotate { sweep } => {
            let turns = (sweep.abs() / std::f64::consts::TAU).round() as usize;
            let plural = if turns == 1 { "" } else { "s" };
            ("rotation".into(), format!("pans {turns} full turn{plural} to the {} in place", side(sweep > 0.0)))
        }
        Motion::Side { index } => {
            (format!("side {}", index + 1), format!("moves forward along side {} of a square loop, then turns at the corner", index + 1))
        }
        Motion::Leg { waypoint } => {
            (format!("leg to waypoint {waypoint}"), format!("turns toward waypoint {waypoint} and moves forward to it"))
        }
        Motion::LookBack { waypoint } => {
            ("look-back".into(), format!("turns in place to look back at waypoint {waypoint}"))
        }
        Motion::Forward => ("forward".into(), "moves forward".into()),
        Motion::Backward => ("backward".into(), "moves backward while keeping the view ahead".into()),
        Motion::Strafe { right } => (format!("strafe {}", side(right)), format!("strafes to the {}", side(right))),
        Motion::Turn { right } => (format!("turn {}", side(right)), format!("turns to the {}", side(right))),
        Motion::Mixed => ("free motion".into(), "moves through the arena".into()),
    }
}

/// Pillar and object colors visible from frame `i`, by a coarse hit test.
fn visible_colors(world: &WorldSpec, clip: &ClipRecord, i: usize) -> Vec<String> {
    let pose = &clip.trajectory.poses[i];
    let Ok(hits) = hit_test(world, pose, 12, 12) else { return Vec::new() };
    let mut seen = BTreeMap::new();
    for h in hits {
        if let HitClass::Pillar(c) | HitClass::Object(c) = h.class {
            seen.insert(c, ());
        }
    }
    seen.keys().map(|c| c.name().to_string()).collect()
}

fn event_sentence(event: &crate::world::spec::EventSpec) -> String {
    use crate::world::spec::EventSpec;
    match event {
        EventSpec::SetTimeOfDay(t) => format!("The scene switches to {}.", t.name()),
        EventSpec::SetTint(_) => "The scene's color tint changes.".into(),
        EventSpec::SpawnObject { color, .. } => format!("A {} block appears.", color.name()),
    }
}

/// Template captions from ground truth: narrative, scene-static, dense temporal.
pub fn make_captions(clip: &ClipRecord) -> CaptionSet {
    let traj = &clip.trajectory;
    let base = clip.world_at(0);
    let scene = scene_static(&base);
    let mut narrative = format!("{scene} The camera");
    let mut dense = Vec::new();
    let segments = if traj.segments.is_empty() {
        vec![crate::geometry::trajectory::Segment { start: 0, end: traj.len(), motion: Motion::Mixed }]
    } else {
        traj.segments.clone()
    };
    for (k, seg) in segments.iter().enumerate() {
        let (event, phrase) = motion_phrase(&seg.motion);
        let world = clip.world_at(seg.end - 1);
        let colors = visible_colors(&world, clip, seg.end - 1);
        let view = if colors.is_empty() {
            String::new()
        } else {
            format!(", with {} pillars in view", join_list(&colors))
        };
        let mut caption = format!("The camera {phrase}{view}.");
        for e in clip.events.iter().filter(|e| e.frame >= seg.start && e.frame < seg.end && e.frame > 0) {
            caption.push(' ');
            caption.push_str(&event_sentence(&e.event));
        }
        let joiner = if k == 0 { " " } else if k + 1 == segments.len() { ", and finally " } else { ", then " };
        narrative.push_str(joiner);
        narrative.push_str(&phrase);
        narrative.push_str(&view);
        dense.push(DenseCaption {
            start_time: traj.relative_time(seg.start),
            end_time: traj.relative_time(seg.end),
            event,
            caption,
        });
    }
    narrative.push('.');
    CaptionSet { narrative, scene_static: scene, dense_temporal: dense }
}

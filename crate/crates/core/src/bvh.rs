//! BVH (BioVision Hierarchy) reading and writing.
//!
//! A document is a `HIERARCHY` section describing a joint tree with rest
//! offsets and channel declarations, followed by a `MOTION` section holding
//! one row of channel values per frame. Rotations are stored in degrees and
//! positions in the file's length unit (centimetres for the data this crate
//! is built around).

use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvhError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid skeleton or clip: {0}")]
    Contract(String),
}

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T, BvhError> {
    Err(BvhError::Parse {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "Xposition" => Channel::Position(Axis::X),
            "Yposition" => Channel::Position(Axis::Y),
            "Zposition" => Channel::Position(Axis::Z),
            "Xrotation" => Channel::Rotation(Axis::X),
            "Yrotation" => Channel::Rotation(Axis::Y),
            "Zrotation" => Channel::Rotation(Axis::Z),
            _ => return None,
        })
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (axis, kind) = match self {
            Channel::Position(a) => (a, "position"),
            Channel::Rotation(a) => (a, "rotation"),
        };
        let axis = match axis {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        };
        write!(f, "{axis}{kind}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
}

impl Joint {
    /// Rotation axes in declared order.
    pub fn rotation_order(&self) -> [Axis; 3] {
        let mut order = [Axis::X; 3];
        let mut i = 0;
        for ch in &self.channels {
            if let Channel::Rotation(a) = ch {
                order[i] = *a;
                i += 1;
            }
        }
        order
    }
}

/// Joint hierarchy in topological order (parents precede children).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    end_sites: Vec<Option<[f64; 3]>>,
    channel_offsets: Vec<usize>,
    channel_count: usize,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, end_sites: Vec<Option<[f64; 3]>>) -> Result<Self, BvhError> {
        let bad = |m: String| Err(BvhError::Contract(m));
        if joints.is_empty() {
            return bad("skeleton has no joints".into());
        }
        if end_sites.len() != joints.len() {
            return bad("end_sites length differs from joint count".into());
        }
        let mut names = std::collections::HashSet::new();
        for (i, j) in joints.iter().enumerate() {
            if !names.insert(j.name.as_str()) {
                return bad(format!("duplicate joint name {:?}", j.name));
            }
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return bad("first joint must be the root".into()),
                (_, None) => return bad(format!("joint {:?} has no parent", j.name)),
                (_, Some(p)) if p >= i => {
                    return bad(format!("joint {:?} precedes its parent", j.name))
                }
                _ => {}
            }
            let rotations: Vec<Axis> = j
                .channels
                .iter()
                .filter_map(|c| match c {
                    Channel::Rotation(a) => Some(*a),
                    _ => None,
                })
                .collect();
            let positions = j.channels.len() - rotations.len();
            let distinct_rot = rotations.len() == 3
                && rotations[0] != rotations[1]
                && rotations[1] != rotations[2]
                && rotations[0] != rotations[2];
            if !distinct_rot {
                return bad(format!(
                    "joint {:?} must declare three distinct rotation channels",
                    j.name
                ));
            }
            let want_positions = if i == 0 { 3 } else { 0 };
            if positions != want_positions {
                return bad(format!(
                    "joint {:?} declares {positions} position channels, expected {want_positions}",
                    j.name
                ));
            }
            if i == 0 {
                let pos: Vec<Axis> = j
                    .channels
                    .iter()
                    .filter_map(|c| match c {
                        Channel::Position(a) => Some(*a),
                        _ => None,
                    })
                    .collect();
                if pos[0] == pos[1] || pos[1] == pos[2] || pos[0] == pos[2] {
                    return bad("root position channels must be distinct".into());
                }
            }
        }
        let mut channel_offsets = Vec::with_capacity(joints.len());
        let mut total = 0;
        for j in &joints {
            channel_offsets.push(total);
            total += j.channels.len();
        }
        Ok(Self {
            joints,
            end_sites,
            channel_offsets,
            channel_count: total,
        })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn end_sites(&self) -> &[Option<[f64; 3]>] {
        &self.end_sites
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    /// Index of the first channel of `joint` within a frame row.
    pub fn channel_offset(&self, joint: usize) -> usize {
        self.channel_offsets[joint]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, j)| j.parent == Some(joint))
            .map(|(i, _)| i)
    }
}

/// Per-frame channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    frame_time: f64,
    channels: usize,
    data: Vec<f64>,
}

impl MotionClip {
    pub fn new(frame_time: f64, channels: usize, data: Vec<f64>) -> Result<Self, BvhError> {
        if !(frame_time > 0.0 && frame_time.is_finite()) {
            return Err(BvhError::Contract(format!(
                "frame time must be positive, got {frame_time}"
            )));
        }
        if channels == 0 || data.len() % channels != 0 {
            return Err(BvhError::Contract(format!(
                "{} values do not form rows of width {channels}",
                data.len()
            )));
        }
        Ok(Self {
            frame_time,
            channels,
            data,
        })
    }

    pub fn from_rows(frame_time: f64, channels: usize, rows: &[Vec<f64>]) -> Result<Self, BvhError> {
        let mut data = Vec::with_capacity(rows.len() * channels);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != channels {
                return Err(BvhError::Contract(format!(
                    "row {i} has {} values, expected {channels}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(frame_time, channels, data)
    }

    pub fn frame_time(&self) -> f64 {
        self.frame_time
    }

    pub fn channel_count(&self) -> usize {
        self.channels
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

struct Tokens<'a> {
    items: Vec<(&'a str, usize)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(source: &'a str) -> Self {
        let mut items = Vec::new();
        for (n, line) in source.lines().enumerate() {
            for word in line.split_whitespace() {
                // braces may be glued to neighbouring words
                let mut rest = word;
                while !rest.is_empty() {
                    if let Some(i) = rest.find(['{', '}']) {
                        if i > 0 {
                            items.push((&rest[..i], n + 1));
                        }
                        items.push((&rest[i..i + 1], n + 1));
                        rest = &rest[i + 1..];
                    } else {
                        items.push((rest, n + 1));
                        break;
                    }
                }
            }
        }
        let last_line = source.lines().count().max(1);
        Self {
            items,
            pos: 0,
            last_line,
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|t| t.0)
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .map(|t| t.1)
            .unwrap_or(self.last_line)
    }

    fn next(&mut self) -> Result<(&'a str, usize), BvhError> {
        match self.items.get(self.pos) {
            Some(&t) => {
                self.pos += 1;
                Ok(t)
            }
            None => parse_err(self.last_line, "unexpected end of input"),
        }
    }

    fn expect(&mut self, keyword: &str) -> Result<usize, BvhError> {
        let (tok, line) = self.next()?;
        if tok == keyword {
            Ok(line)
        } else {
            parse_err(line, format!("expected {keyword:?}, found {tok:?}"))
        }
    }

    fn number(&mut self) -> Result<f64, BvhError> {
        let (tok, line) = self.next()?;
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => parse_err(line, format!("expected a number, found {tok:?}")),
        }
    }

    fn vec3(&mut self) -> Result<[f64; 3], BvhError> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

struct HierarchyBuilder {
    joints: Vec<Joint>,
    end_sites: Vec<Option<[f64; 3]>>,
}

impl HierarchyBuilder {
    fn joint(&mut self, t: &mut Tokens<'_>, parent: Option<usize>) -> Result<(), BvhError> {
        let (name, line) = t.next()?;
        if name == "{" {
            return parse_err(line, "joint is missing a name");
        }
        t.expect("{")?;
        t.expect("OFFSET")?;
        let offset = t.vec3()?;
        let (kw, line) = t.next()?;
        if kw != "CHANNELS" {
            return parse_err(line, format!("expected \"CHANNELS\", found {kw:?}"));
        }
        let (count, cline) = t.next()?;
        let count: usize = count
            .parse()
            .or_else(|_| parse_err(cline, format!("bad channel count {count:?}")))?;
        let mut channels = Vec::with_capacity(count);
        for _ in 0..count {
            let (tok, l) = t.next()?;
            match Channel::parse(tok) {
                Some(c) => channels.push(c),
                None => return parse_err(l, format!("unknown channel {tok:?}")),
            }
        }
        let index = self.joints.len();
        self.joints.push(Joint {
            name: name.to_string(),
            parent,
            offset,
            channels,
        });
        self.end_sites.push(None);
        loop {
            let (tok, l) = t.next()?;
            match tok {
                "JOINT" => self.joint(t, Some(index))?,
                "End" => {
                    t.expect("Site")?;
                    t.expect("{")?;
                    t.expect("OFFSET")?;
                    let site = t.vec3()?;
                    t.expect("}")?;
                    if self.end_sites[index].is_some() {
                        return parse_err(l, format!("joint {name:?} has two end sites"));
                    }
                    self.end_sites[index] = Some(site);
                }
                "}" => return Ok(()),
                other => return parse_err(l, format!("unexpected token {other:?} in joint {name:?}")),
            }
        }
    }
}

/// Parses a complete BVH document.
pub fn parse_bvh(source: &str) -> Result<(Skeleton, MotionClip), BvhError> {
    let mut t = Tokens::new(source);
    t.expect("HIERARCHY")?;
    let root_line = t.expect("ROOT")?;
    let mut builder = HierarchyBuilder {
        joints: Vec::new(),
        end_sites: Vec::new(),
    };
    builder.joint(&mut t, None)?;
    if t.peek() == Some("ROOT") {
        return parse_err(t.line(), "multiple roots are not supported");
    }
    let skeleton = Skeleton::new(builder.joints, builder.end_sites).map_err(|e| match e {
        BvhError::Contract(m) => BvhError::Parse {
            line: root_line,
            message: m,
        },
        e => e,
    })?;

    t.expect("MOTION")?;
    t.expect("Frames:")?;
    let (count, line) = t.next()?;
    let frames: usize = count
        .parse()
        .or_else(|_| parse_err(line, format!("bad frame count {count:?}")))?;
    t.expect("Frame")?;
    t.expect("Time:")?;
    let frame_line = t.line();
    let frame_time = t.number()?;
    if frame_time <= 0.0 {
        return parse_err(frame_line, "frame time must be positive");
    }
    let width = skeleton.channel_count();
    let mut data = Vec::with_capacity(frames * width);
    for f in 0..frames {
        for _ in 0..width {
            if t.peek().is_none() {
                return parse_err(
                    t.line(),
                    format!("motion data ends in frame {f}; {frames} frames declared"),
                );
            }
            data.push(t.number()?);
        }
    }
    if t.peek().is_some() {
        return parse_err(
            t.line(),
            format!("more motion values than {frames} frames of {width} channels"),
        );
    }
    let clip = MotionClip::new(frame_time, width, data)?;
    Ok((skeleton, clip))
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0.000000".to_string();
    }
    // at least six significant digits whatever the magnitude
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).clamp(6, 20) as usize;
    format!("{v:.decimals$}")
}

/// Serializes a skeleton and clip as BVH text with `\n` line endings.
pub fn write_bvh(skeleton: &Skeleton, clip: &MotionClip) -> Result<String, BvhError> {
    if clip.channel_count() != skeleton.channel_count() {
        return Err(BvhError::Contract(format!(
            "clip has {} channels, skeleton declares {}",
            clip.channel_count(),
            skeleton.channel_count()
        )));
    }
    let mut out = String::from("HIERARCHY\n");
    write_joint(skeleton, 0, 0, &mut out);
    out.push_str("MOTION\n");
    let _ = writeln!(out, "Frames: {}", clip.frame_count());
    let _ = writeln!(out, "Frame Time: {}", fmt_num(clip.frame_time()));
    for row in clip.frames() {
        let line: Vec<String> = row.iter().map(|&v| fmt_num(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn write_joint(skeleton: &Skeleton, index: usize, depth: usize, out: &mut String) {
    let pad = "\t".repeat(depth);
    let joint = &skeleton.joints[index];
    let kw = if index == 0 { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{pad}{kw} {}", joint.name);
    let _ = writeln!(out, "{pad}{{");
    let o = joint.offset;
    let _ = writeln!(
        out,
        "{pad}\tOFFSET {} {} {}",
        fmt_num(o[0]),
        fmt_num(o[1]),
        fmt_num(o[2])
    );
    let chans: Vec<String> = joint.channels.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "{pad}\tCHANNELS {} {}", chans.len(), chans.join(" "));
    for child in skeleton.children(index) {
        write_joint(skeleton, child, depth + 1, out);
    }
    if let Some(s) = skeleton.end_sites[index] {
        let _ = writeln!(out, "{pad}\tEnd Site");
        let _ = writeln!(out, "{pad}\t{{");
        let _ = writeln!(
            out,
            "{pad}\t\tOFFSET {} {} {}",
            fmt_num(s[0]),
            fmt_num(s[1]),
            fmt_num(s[2])
        );
        let _ = writeln!(out, "{pad}\t}}");
    }
    let _ = writeln!(out, "{pad}}}");
}

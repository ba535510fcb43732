//! Event streams, frame binning, synthetic moving-bar data and dataset files.
//!
//! On disk a dataset is laid out as `<root>/<split>/<class>/<sample>.csv`,
//! each CSV starting with the header `t_us,x,y,p`, next to a `<sample>.label`
//! sidecar holding `label`, `width` and `height` as `key=value` lines.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::parse_kv;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "t_us,x,y,p";
pub const SENSOR: u16 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    /// 1 = ON (brightness increase), 0 = OFF.
    pub p: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub label: usize,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::contract(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.p > 1 {
                return Err(Error::contract(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && e.t_us < self.events[i - 1].t_us {
                return Err(Error::contract(format!("event {i} goes back in time")));
            }
        }
        Ok(())
    }

    /// Mirror image across the vertical axis (`x → W−1−x`).
    pub fn mirror_x(&self) -> EventStream {
        EventStream {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    x: self.width - 1 - e.x,
                    ..*e
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Bins events into `[T, 2, H, W]` counts, one channel per polarity.
///
/// Bins split `[t_min, t_max]` uniformly; `t_max` lands in the last bin and a
/// zero-length span puts every event in bin 0.
pub fn events_to_frames(s: &EventStream, bins: usize) -> Result<Tensor> {
    if s.events.is_empty() {
        return Err(Error::contract("cannot bin an empty event stream"));
    }
    if bins == 0 {
        return Err(Error::contract("need at least one time bin"));
    }
    s.validate()?;
    let (w, h) = (s.width as usize, s.height as usize);
    let t0 = s.events[0].t_us;
    let span = s.events[s.events.len() - 1].t_us - t0;
    let mut frames = Tensor::zeros(&[bins, 2, h, w]);
    let data = frames.data_mut();
    for e in &s.events {
        let bin = if span == 0 {
            0
        } else {
            (((e.t_us - t0) as u128 * bins as u128 / span as u128) as usize).min(bins - 1)
        };
        data[((bin * 2 + e.p as usize) * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown direction '{s}'")))
    }
}

/// A bar sweeping across a 32×32 sensor: ON events along its leading edge,
/// OFF events along its trailing edge, plus sparse background noise.
///
/// The sweep is generated once along a canonical axis and then oriented, so
/// `left` is the exact x-mirror of `right` for the same seed.
pub fn gen_moving_bar(direction: Direction, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SENSOR as i32;
    let thickness = rng.random_range(3..=5);
    let extent_lo = rng.random_range(0..8);
    let extent_hi = rng.random_range(n - 8..=n);
    let step_us: u64 = rng.random_range(2_000..4_000);
    let start_us: u64 = rng.random_range(0..10_000);
    // (t, along, across, polarity) in the canonical frame, moving towards +along
    let mut raw: Vec<(u64, i32, i32, u8)> = Vec::new();
    for pos in 0..n + thickness {
        let t = start_us + pos as u64 * step_us;
        for across in extent_lo..extent_hi {
            if pos < n && rng.random_bool(0.85) {
                raw.push((t + rng.random_range(0..step_us / 2), pos, across, 1));
            }
            let trail = pos - thickness;
            if (0..n).contains(&trail) && rng.random_bool(0.85) {
                raw.push((t + rng.random_range(0..step_us / 2), trail, across, 0));
            }
        }
    }
    let end_us = start_us + (n + thickness) as u64 * step_us;
    let noise = rng.random_range(10..30);
    for _ in 0..noise {
        raw.push((
            rng.random_range(start_us..end_us),
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..2),
        ));
    }
    raw.sort();
    let last = n - 1;
    let events = raw
        .into_iter()
        .map(|(t_us, a, b, p)| {
            let (x, y) = match direction {
                Direction::Right => (a, b),
                Direction::Left => (last - a, b),
                Direction::Down => (b, a),
                Direction::Up => (b, last - a),
            };
            Event {
                t_us,
                x: x as u16,
                y: y as u16,
                p,
            }
        })
        .collect();
    EventStream {
        events,
        width: SENSOR,
        height: SENSOR,
        label: direction.label(),
    }
}

/// `T` identical copies of a `[C, H, W]` image along a new leading axis.
pub fn repeat_static(image: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::contract("repeat count must be >= 1"));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    Tensor::new(shape, image.data().repeat(steps))
}

pub fn load_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::load(path)
}

/// One network input `[T, C, H, W]` and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

/// Stacks samples into a time-major batch `[T, B, C, H, W]`.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let shape = first.input.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::dim("samples need a leading time axis"));
    }
    if let Some(bad) = samples.iter().find(|s| s.input.shape() != shape.as_slice()) {
        return Err(Error::dim(format!(
            "sample shape {:?} differs from {shape:?}",
            bad.input.shape()
        )));
    }
    let steps = shape[0];
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(steps * samples.len() * per);
    for t in 0..steps {
        for s in samples {
            data.extend_from_slice(&s.input.data()[t * per..(t + 1) * per]);
        }
    }
    let mut out_shape = vec![steps, samples.len()];
    out_shape.extend_from_slice(&shape[1..]);
    Ok((Tensor::new(out_shape, data)?, samples.iter().map(|s| s.label).collect()))
}

/// Splits `samples` (in order) into batches of at most `size`.
pub fn batches(samples: &[Sample], size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    samples
        .chunks(size.max(1))
        .map(|c| stack_batch(&c.iter().collect::<Vec<_>>()))
        .collect()
}

/// `per_class` moving-bar samples of each direction, binned into `steps` frames.
/// Sample `i` of class `c` uses seed `seed·1_000_003 + 4·i + c`.
pub fn moving_bar_samples(per_class: usize, steps: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(4 * per_class);
    for i in 0..per_class {
        for d in Direction::ALL {
            let s = gen_moving_bar(d, sample_seed(seed, i, d));
            out.push(Sample {
                input: events_to_frames(&s, steps)?,
                label: d.label(),
            });
        }
    }
    Ok(out)
}

fn sample_seed(seed: u64, i: usize, d: Direction) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(4 * i as u64 + d.label() as u64)
}

pub fn write_events_csv(path: impl AsRef<Path>, s: &EventStream) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(16 * s.events.len() + 16);
    text.push_str(CSV_HEADER);
    text.push('\n');
    for e in &s.events {
        text.push_str(&format!("{},{},{},{}\n", e.t_us, e.x, e.y, e.p));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let label = format!("label={}\nwidth={}\nheight={}\n", s.label, s.width, s.height);
    let side = path.with_extension("label");
    fs::write(&side, label).map_err(|e| Error::io(side, e))
}

/// Parses CSV event text; errors carry the byte offset of the offending line.
pub fn parse_events_csv(text: &str, width: u16, height: u16, label: usize) -> Result<EventStream> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected header '{CSV_HEADER}'"),
        });
    }
    offset += header.len() as u64;
    let mut events = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len() as u64;
        let row = line.trim_end();
        if row.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format { offset: at, msg };
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<u64> {
            fields[i]
                .trim()
                .parse::<u64>()
                .map_err(|_| bad(format!("field {} ('{}') is not a non-negative integer", i + 1, fields[i])))
        };
        let (t_us, x, y, p) = (num(0)?, num(1)?, num(2)?, num(3)?);
        if x >= width as u64 || y >= height as u64 {
            return Err(bad(format!("coordinate ({x}, {y}) outside {width}x{height} sensor")));
        }
        if p > 1 {
            return Err(bad(format!("polarity {p} is not 0 or 1")));
        }
        if events.last().is_some_and(|e: &Event| t_us < e.t_us) {
            return Err(bad("timestamps must be non-decreasing".into()));
        }
        events.push(Event {
            t_us,
            x: x as u16,
            y: y as u16,
            p: p as u8,
        });
    }
    Ok(EventStream {
        events,
        width,
        height,
        label,
    })
}

/// Reads a CSV file and its `.label` sidecar.
pub fn read_events_csv(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let side = path.with_extension("label");
    let meta = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = parse_kv(&meta)?;
    let get = |k: &str| -> Result<u64> {
        meta.get(k)
            .ok_or_else(|| Error::Config(format!("{}: missing '{k}'", side.display())))?
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad value for '{k}'", side.display())))
    };
    let (label, width, height) = (get("label")? as usize, get("width")?, get("height")?);
    if width == 0 || height == 0 || width > u16::MAX as u64 || height > u16::MAX as u64 {
        return Err(Error::Config(format!("{}: implausible sensor size", side.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events_csv(&text, width as u16, height as u16, label).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads `<root>/<split>/<class>/*.csv`, binning each stream into `steps` frames.
pub fn load_event_split(root: impl AsRef<Path>, split: &str, steps: usize) -> Result<Vec<Sample>> {
    let dir = root.as_ref().join(split);
    let mut out = Vec::new();
    for class_dir in sorted_entries(&dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        for file in sorted_entries(&class_dir)? {
            if file.extension().is_some_and(|e| e == "csv") {
                let s = read_events_csv(&file)?;
                out.push(Sample {
                    input: events_to_frames(&s, steps)?,
                    label: s.label,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no samples under {}", dir.display())));
    }
    Ok(out)
}

/// Writes a moving-bar dataset with `train` and `test` splits.
pub fn write_moving_bar_dataset(root: impl AsRef<Path>, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    let root = root.as_ref();
    for (split, count, split_seed) in [("train", train_per_class, seed), ("test", test_per_class, seed ^ 0x5eed)] {
        for d in Direction::ALL {
            let dir = root.join(split).join(d.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let s = gen_moving_bar(d, sample_seed(split_seed, i, d));
                write_events_csv(dir.join(format!("{i:05}.csv")), &s)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(times: &[u64]) -> EventStream {
        EventStream {
            events: times.iter().map(|&t| Event { t_us: t, x: 0, y: 0, p: 1 }).collect(),
            width: 2,
            height: 2,
            label: 0,
        }
    }

    #[test]
    fn quarters_fill_one_bin_each() {
        let f = events_to_frames(&stream(&[0, 100, 200, 300]), 4).unwrap();
        for t in 0..4 {
            assert_eq!(f.get(&[t, 1, 0, 0]), 1.0);
        }
    }

    #[test]
    fn single_instant_goes_to_first_bin() {
        let f = events_to_frames(&stream(&[7, 7, 7]), 3).unwrap();
        assert_eq!(f.get(&[0, 1, 0, 0]), 3.0);
        assert_eq!(f.sum(), 3.0);
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(matches!(events_to_frames(&stream(&[]), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn mirror_symmetry() {
        let r = gen_moving_bar(Direction::Right, 9);
        let l = gen_moving_bar(Direction::Left, 9);
        assert_eq!(l.mirror_x().events, r.events);
    }

    #[test]
    fn csv_errors_are_positioned() {
        let text = "t_us,x,y,p\n1,0,0,1\n2,9,0,1\n";
        match parse_events_csv(text, 4, 4, 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_events_csv("t,x\n", 4, 4, 0), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn repeat_once_unsqueezes() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = repeat_static(&img, 1).unwrap();
        assert_eq!(r.shape(), &[1, 1, 2, 2]);
        assert_eq!(r.data(), img.data());
    }
}

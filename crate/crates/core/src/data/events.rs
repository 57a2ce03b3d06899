//! Event streams in a minimal CSV format (`t_us,x,y,polarity`), binned into
//! `T` equal-duration frames with one plane per polarity.

use std::fs;
use std::io::BufRead;
use std::path::Path;

use super::{is_test_index, DataError, Dataset, Sample};
use crate::autodiff::Tensor;

pub const EVENT_CSV_HEADER: &str = "t_us,x,y,polarity";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub t_us: u64,
    pub x: u32,
    pub y: u32,
    pub polarity: u8,
}

/// Reads the CSV body. Requires the exact header and rows sorted by time.
pub fn parse_event_csv(reader: impl BufRead) -> Result<Vec<EventRecord>, DataError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| DataError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .unwrap_or_default();
    if header.trim() != EVENT_CSV_HEADER {
        return Err(DataError::Csv {
            line: 1,
            reason: format!("expected header `{EVENT_CSV_HEADER}`"),
        });
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| DataError::Csv {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(DataError::Csv {
                line: line_no,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| DataError::Csv {
            line: line_no,
            reason: format!("invalid {what}"),
        };
        let event = EventRecord {
            t_us: fields[0].parse().map_err(|_| bad("t_us"))?,
            x: fields[1].parse().map_err(|_| bad("x"))?,
            y: fields[2].parse().map_err(|_| bad("y"))?,
            polarity: match fields[3] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("polarity")),
            },
        };
        if events
            .last()
            .is_some_and(|prev: &EventRecord| prev.t_us > event.t_us)
        {
            return Err(DataError::Unsorted(events.len()));
        }
        events.push(event);
    }
    Ok(events)
}

/// Counts events per `(window, polarity, y, x)` and divides each window by
/// its own maximum count. The span `[t_min, t_max]` is cut into `T` equal
/// windows; the last window includes `t_max`.
pub fn bin_events(
    events: &[EventRecord],
    width: u32,
    height: u32,
    timesteps: usize,
) -> Result<Tensor, DataError> {
    let counts = count_events(events, width, height, timesteps)?;
    let plane = 2 * (width as usize) * (height as usize);
    let mut frames = counts;
    for window in frames.chunks_mut(plane) {
        let max = window.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for c in window.iter_mut() {
                *c /= max;
            }
        }
    }
    Ok(Tensor::new(vec![timesteps, plane], frames).expect("positive dims"))
}

/// Raw per-cell counts, `T * 2 * width * height` entries.
pub fn count_events(
    events: &[EventRecord],
    width: u32,
    height: u32,
    timesteps: usize,
) -> Result<Vec<f64>, DataError> {
    if timesteps == 0 || width == 0 || height == 0 {
        return Err(DataError::InvalidSpec(
            "timesteps, width and height must be positive".into(),
        ));
    }
    let first = events.first().ok_or(DataError::EmptyEvents)?;
    let last = events.last().expect("non-empty");
    let (w, h) = (width as usize, height as usize);
    let plane = 2 * w * h;
    let span = u128::from(last.t_us - first.t_us.min(last.t_us));
    let mut counts = vec![0.0; timesteps * plane];
    let mut prev = first.t_us;
    for (index, e) in events.iter().enumerate() {
        if e.t_us < prev {
            return Err(DataError::Unsorted(index));
        }
        prev = e.t_us;
        if e.x >= width || e.y >= height || e.polarity > 1 {
            return Err(DataError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
        let offset = u128::from(e.t_us - first.t_us);
        let window = (offset * timesteps as u128)
            .checked_div(span)
            .map_or(0, |w| (w as usize).min(timesteps - 1));
        let cell = window * plane + e.polarity as usize * w * h + e.y as usize * w + e.x as usize;
        counts[cell] += 1.0;
    }
    Ok(counts)
}

/// Loads `dir/<class>/*.csv`, where `<class>` is a numeric directory name.
/// Files are visited in sorted order; every fifth file of a class is held out.
pub fn load_event_dir(
    dir: impl AsRef<Path>,
    width: u32,
    height: u32,
    timesteps: usize,
) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let mut classes: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let label = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| {
                DataError::InvalidSpec(format!("class directory {} is not numeric", path.display()))
            })?;
        classes.push((label, path));
    }
    classes.sort();
    let num_classes = classes.last().map_or(0, |(l, _)| l + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, class_dir) in &classes {
        let mut files: Vec<_> = fs::read_dir(class_dir)
            .map_err(|e| DataError::io(class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for (k, file) in files.iter().enumerate() {
            let handle = fs::File::open(file).map_err(|e| DataError::io(file, e))?;
            let events = parse_event_csv(std::io::BufReader::new(handle))?;
            let sample = Sample {
                input_seq: bin_events(&events, width, height, timesteps)?,
                label: *label,
            };
            if is_test_index(k) {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        classes: num_classes,
        input_dim: 2 * width as usize * height as usize,
        timesteps,
    })
}

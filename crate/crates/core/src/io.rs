//! CSV formats for trajectories and their simulation-only ground truth.
//!
//! Trajectory rows are `t,location,color1,color2,reward,action` with `t`
//! counting from 1, locations and actions as their enumeration indices and
//! `-1` for a color that was not seen. Ground truth rows are
//! `t,food1,food2,belief1,belief2`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::agent_sim::{GroundTruth, Step, Trajectory};
use crate::error::{IrcError, Result};
use crate::task_env::{Action, Location};

pub const TRAJECTORY_HEADER: [&str; 6] = ["t", "location", "color1", "color2", "reward", "action"];
pub const GROUND_TRUTH_HEADER: [&str; 5] = ["t", "food1", "food2", "belief1", "belief2"];

fn csv_error(e: csv::Error) -> IrcError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    IrcError::Parse {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

pub fn write_trajectory<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER).map_err(csv_error)?;
    for (t, s) in traj.steps.iter().enumerate() {
        let color = |c: Option<usize>| c.map_or(-1, |c| c as i64).to_string();
        w.write_record([
            (t + 1).to_string(),
            s.location.index().to_string(),
            color(s.colors[0]),
            color(s.colors[1]),
            s.reward.to_string(),
            s.action.index().to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ground_truth<W: Write>(out: W, gt: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GROUND_TRUTH_HEADER).map_err(csv_error)?;
    for (t, (food, belief)) in gt.food.iter().zip(&gt.beliefs).enumerate() {
        w.write_record([
            (t + 1).to_string(),
            u8::from(food[0]).to_string(),
            u8::from(food[1]).to_string(),
            belief[0].to_string(),
            belief[1].to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

struct Rows<R: Read> {
    reader: csv::Reader<R>,
    header: &'static [&'static str],
}

impl<R: Read> Rows<R> {
    fn new(input: R, header: &'static [&'static str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let found = reader.headers().map_err(csv_error)?.clone();
        if found.len() != header.len() || found.iter().zip(header).any(|(a, b)| a != *b) {
            return Err(IrcError::Parse {
                row: 1,
                column: String::new(),
                message: format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
            });
        }
        Ok(Rows { reader, header })
    }

    /// Parse every record into `T` with `f(row, fields)`.
    fn parse<T>(mut self, mut f: impl FnMut(&Field<'_>) -> Result<T>) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for record in self.reader.records() {
            let record = record.map_err(csv_error)?;
            let row = record.position().map_or(out.len() + 2, |p| p.line() as usize);
            let field = Field {
                record: &record,
                header: self.header,
                row,
            };
            let item = f(&field)?;
            let t: usize = field.get("t")?;
            if t != out.len() + 1 {
                return Err(field.error("t", format!("expected step {}, found {t}", out.len() + 1)));
            }
            out.push(item);
        }
        Ok(out)
    }
}

struct Field<'a> {
    record: &'a csv::StringRecord,
    header: &'static [&'static str],
    row: usize,
}

impl Field<'_> {
    fn error(&self, column: &str, message: String) -> IrcError {
        IrcError::Parse {
            row: self.row,
            column: column.to_string(),
            message,
        }
    }

    fn raw(&self, column: &str) -> &str {
        let idx = self.header.iter().position(|h| *h == column).expect("known column");
        self.record.get(idx).unwrap_or("")
    }

    fn get<T: std::str::FromStr>(&self, column: &str) -> Result<T> {
        let raw = self.raw(column);
        raw.parse()
            .map_err(|_| self.error(column, format!("cannot parse `{raw}`")))
    }

    fn color(&self, column: &str) -> Result<Option<usize>> {
        let v: i64 = self.get(column)?;
        match v {
            -1 => Ok(None),
            v if v >= 0 => Ok(Some(v as usize)),
            v => Err(self.error(column, format!("color {v} is negative"))),
        }
    }

    fn flag(&self, column: &str) -> Result<bool> {
        match self.get::<u8>(column)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.error(column, format!("expected 0 or 1, found {v}"))),
        }
    }
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory> {
    let steps = Rows::new(input, &TRAJECTORY_HEADER)?.parse(|f| {
        let loc: usize = f.get("location")?;
        let location =
            Location::from_index(loc).ok_or_else(|| f.error("location", format!("unknown location {loc}")))?;
        let act: usize = f.get("action")?;
        let action = Action::from_index(act).ok_or_else(|| f.error("action", format!("unknown action {act}")))?;
        let reward: u8 = f.get("reward")?;
        if reward > 1 {
            return Err(f.error("reward", format!("reward {reward} out of range")));
        }
        Ok(Step {
            location,
            colors: [f.color("color1")?, f.color("color2")?],
            reward,
            action,
        })
    })?;
    Ok(Trajectory {
        steps,
        ground_truth: None,
    })
}

pub fn read_ground_truth<R: Read>(input: R) -> Result<GroundTruth> {
    let rows = Rows::new(input, &GROUND_TRUTH_HEADER)?.parse(|f| {
        let mut beliefs = [0.0; 2];
        for (b, col) in beliefs.iter_mut().zip(["belief1", "belief2"]) {
            *b = f.get(col)?;
            if !(0.0..=1.0).contains(b) {
                return Err(f.error(col, format!("belief {b} outside [0, 1]")));
            }
        }
        Ok(([f.flag("food1")?, f.flag("food2")?], beliefs))
    })?;
    let (food, beliefs) = rows.into_iter().unzip();
    Ok(GroundTruth { food, beliefs })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory(File::open(path)?)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    read_ground_truth(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        Trajectory {
            steps: vec![
                Step {
                    location: Location::Middle,
                    colors: [Some(3), Some(0)],
                    reward: 0,
                    action: Action::GotoBox1,
                },
                Step {
                    location: Location::Box1,
                    colors: [Some(4), None],
                    reward: 1,
                    action: Action::Press,
                },
            ],
            ground_truth: Some(GroundTruth {
                food: vec![[true, false], [false, false]],
                beliefs: vec![[0.1234567890123, 0.5], [1.0 / 3.0, 0.0]],
            }),
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "t,location,color1,color2,reward,action\n1,0,3,0,0,2\n2,1,4,-1,1,4\n");
        let back = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back.steps, t.steps);
        assert!(back.ground_truth.is_none());
    }

    #[test]
    fn ground_truth_round_trip_is_exact() {
        let gt = sample().ground_truth.unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &gt).unwrap();
        assert_eq!(read_ground_truth(&buf[..]).unwrap(), gt);
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &Trajectory::default()).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "t,location,color1,color2,reward,action\n");
        assert!(read_trajectory(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn errors_name_row_and_column() {
        let text = "t,location,color1,color2,reward,action\n1,0,3,0,0,1\n2,1,x,0,0,4\n";
        match read_trajectory(text.as_bytes()) {
            Err(IrcError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "color1");
            }
            other => panic!("{other:?}"),
        }
        let text = "t,location,color1,color2,reward,action\n1,0,3,0,0,9\n";
        assert!(matches!(
            read_trajectory(text.as_bytes()),
            Err(IrcError::Parse { column, .. }) if column == "action"
        ));
        let text = "t,loc,color1,color2,reward,action\n";
        assert!(matches!(read_trajectory(text.as_bytes()), Err(IrcError::Parse { row: 1, .. })));
        let text = "t,location,color1,color2,reward,action\n2,0,3,0,0,1\n";
        assert!(matches!(
            read_trajectory(text.as_bytes()),
            Err(IrcError::Parse { column, .. }) if column == "t"
        ));
    }
}

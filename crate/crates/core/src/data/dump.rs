//! Canonical dataset dump.
//!
//! ```text
//! #fields:<n> #features:<n>
//! user_id<TAB>label<TAB>field:index[,field:index...]
//! ```
//!
//! Lines of one user are kept in chronological order. Value weights are not
//! stored: on load every feature gets weight `1/k`, `k` being the number of
//! indices its field has in that sample (single-valued fields get 1).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Dataset, Feature, FeatureSpace, Sample, UserId, UserSamples};
use crate::{Error, Result};

pub fn write_dump(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "#fields:{} #features:{}",
        dataset.space.num_fields(),
        dataset.space.num_features()
    )?;
    let mut line = String::new();
    for user in &dataset.users {
        for s in &user.samples {
            line.clear();
            let _ = write!(line, "{}\t{}\t", s.user, s.label);
            for (i, f) in s.features.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{}:{}", f.field, f.index);
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

fn parse_header(path: &str, line: &str) -> Result<(usize, usize)> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    let mut fields = None;
    let mut features = None;
    for tok in line.split_whitespace() {
        if let Some(v) = tok.strip_prefix("#fields:") {
            fields = Some(v.parse::<usize>().map_err(|_| bad("invalid #fields"))?);
        } else if let Some(v) = tok.strip_prefix("#features:") {
            features = Some(v.parse::<usize>().map_err(|_| bad("invalid #features"))?);
        } else {
            return Err(bad(&format!("unexpected header token {tok:?}")));
        }
    }
    match (fields, features) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(bad("header must be '#fields:<n> #features:<n>'")),
    }
}

/// Load a dump. Field bucket ranges are recovered from the lowest index seen
/// in each field; unseen fields get empty ranges.
pub fn read_dump(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Empty("dataset dump")),
    };
    let (num_fields, num_features) = parse_header(&name, &header)?;

    let mut users: Vec<UserSamples> = Vec::new();
    let mut position: BTreeMap<UserId, usize> = BTreeMap::new();
    let mut lowest = vec![usize::MAX; num_fields];
    let mut raw: Vec<(usize, u16, u32)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: name.clone(),
            line: lineno,
            msg,
        };
        let mut cols = line.split('\t');
        let (Some(u), Some(y), Some(feats), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected 3 tab-separated columns".into()));
        };
        let user: UserId = u.trim().parse().map_err(|_| bad(format!("invalid user id {u:?}")))?;
        let label: u8 = match y.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        raw.clear();
        for tok in feats.split(',').filter(|t| !t.is_empty()) {
            let (f, idx) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("feature {tok:?} is not field:index")))?;
            let field: usize = f.parse().map_err(|_| bad(format!("invalid field {f:?}")))?;
            let index: usize = idx.parse().map_err(|_| bad(format!("invalid index {idx:?}")))?;
            if field >= num_fields {
                return Err(bad(format!("field {field} >= #fields {num_fields}")));
            }
            if index >= num_features {
                return Err(bad(format!("index {index} >= #features {num_features}")));
            }
            lowest[field] = lowest[field].min(index);
            raw.push((0, field as u16, index as u32));
        }
        let mut counts = vec![0usize; num_fields];
        for r in &raw {
            counts[r.1 as usize] += 1;
        }
        let features = raw
            .iter()
            .map(|&(_, field, index)| Feature {
                field,
                index,
                value: (1.0 / counts[field as usize] as f64) as f32,
            })
            .collect();
        let mut sample = Sample::new(user, label, features)?;
        let slot = *position.entry(user).or_insert_with(|| {
            users.push(UserSamples {
                user_id: user,
                samples: Vec::new(),
            });
            users.len() - 1
        });
        sample.timestamp = Some(users[slot].samples.len() as i64);
        users[slot].samples.push(sample);
    }

    // bucket boundaries: offset(f) = lowest index seen in f, filled backwards
    let mut offsets = vec![0usize; num_fields + 1];
    offsets[num_fields] = num_features;
    for f in (0..num_fields).rev() {
        offsets[f] = if lowest[f] == usize::MAX {
            offsets[f + 1]
        } else {
            lowest[f].min(offsets[f + 1])
        };
    }
    offsets[0] = 0;
    let fields = (0..num_fields)
        .map(|f| (format!("field_{f}"), offsets[f + 1] - offsets[f]))
        .collect();
    let space = FeatureSpace::new(fields)?;
    for u in &users {
        for s in &u.samples {
            s.validate(&space).map_err(|_| Error::Parse {
                path: name.clone(),
                line: 0,
                msg: format!(
                    "user {}: fields are not laid out in contiguous ascending ranges",
                    u.user_id
                ),
            })?;
        }
    }
    users.sort_by_key(|u| u.user_id);
    Ok(Dataset { space, users })
}

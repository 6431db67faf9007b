//! Flat-file dataset dump/load.
//!
//! One file per domain split:
//!
//! ```text
//! mmda-dataset v1
//! domain <id> <train|test>
//! classes <K>
//! dims <d0> <d1> ...
//! segments <count>
//! segment <id> <class> <frames>
//! m <modality> <frames * dim floats>
//! ...
//! ```
//!
//! The harness normally regenerates data from spec plus seed instead of
//! shipping these files; the format exists for interchange and inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ActionSegment, DataError, Dataset, Split};
use crate::nets::FrameMatrix;

const HEADER: &str = "mmda-dataset v1";

pub fn dump_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let _ = writeln!(out, "domain {} {}", dataset.domain_id, dataset.split.as_str());
    let _ = writeln!(out, "classes {}", dataset.class_count);
    let dims: Vec<String> = dataset.frame_dims.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "dims {}", dims.join(" "));
    let _ = writeln!(out, "segments {}", dataset.len());
    for seg in &dataset.segments {
        let _ = writeln!(out, "segment {} {} {}", seg.id, seg.class(), seg.len());
        for (m, fm) in seg.modalities.iter().enumerate() {
            let mut line = format!("m {m}");
            for v in &fm.data {
                let _ = write!(line, " {v}");
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), DataError> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or(DataError::Parse {
                line: 0,
                msg: "unexpected end of file".into(),
            })
    }

    fn expect_fields(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>), DataError> {
        let (no, line) = self.next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&keyword) {
            return Err(DataError::Parse {
                line: no,
                msg: format!("expected a {keyword:?} record"),
            });
        }
        Ok((no, fields))
    }
}

fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, DataError> {
    s.parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("cannot parse {s:?}"),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
    };

    let (no, header) = reader.next()?;
    if header != HEADER {
        return Err(DataError::Parse {
            line: no,
            msg: format!("unknown header {header:?}"),
        });
    }
    let (no, domain) = reader.expect_fields("domain")?;
    if domain.len() != 3 {
        return Err(DataError::Parse {
            line: no,
            msg: "domain record needs an id and a split".into(),
        });
    }
    let domain_id = domain[1].to_string();
    let split = match domain[2] {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(DataError::Parse {
                line: no,
                msg: format!("unknown split {other:?}"),
            })
        }
    };
    let (no, classes) = reader.expect_fields("classes")?;
    let class_count: usize = parse(classes.get(1).copied().unwrap_or(""), no)?;
    let (no, dims_fields) = reader.expect_fields("dims")?;
    let frame_dims: Vec<usize> = dims_fields[1..]
        .iter()
        .map(|f| parse(f, no))
        .collect::<Result<_, _>>()?;
    let (no, seg_count) = reader.expect_fields("segments")?;
    let count: usize = parse(seg_count.get(1).copied().unwrap_or(""), no)?;

    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let (no, seg) = reader.expect_fields("segment")?;
        if seg.len() != 4 {
            return Err(DataError::Parse {
                line: no,
                msg: "segment record needs id, class, frames".into(),
            });
        }
        let id: u32 = parse(seg[1], no)?;
        let class: usize = parse(seg[2], no)?;
        let frames: usize = parse(seg[3], no)?;
        if class >= class_count {
            return Err(DataError::Parse {
                line: no,
                msg: format!("class {class} out of range for {class_count} classes"),
            });
        }
        let mut modalities = Vec::with_capacity(frame_dims.len());
        for (m, &dim) in frame_dims.iter().enumerate() {
            let (no, fields) = reader.expect_fields("m")?;
            let idx: usize = parse(fields.get(1).copied().unwrap_or(""), no)?;
            if idx != m {
                return Err(DataError::Parse {
                    line: no,
                    msg: format!("expected modality {m}, found {idx}"),
                });
            }
            let data: Vec<f64> = fields[2..]
                .iter()
                .map(|f| parse(f, no))
                .collect::<Result<_, _>>()?;
            if data.len() != frames * dim {
                return Err(DataError::Parse {
                    line: no,
                    msg: format!("expected {} values, found {}", frames * dim, data.len()),
                });
            }
            modalities.push(FrameMatrix::new(dim, data));
        }
        segments.push(ActionSegment {
            id,
            class,
            modalities,
        });
    }
    Ok(Dataset::new(domain_id, split, class_count, frame_dims, segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_domains, SyntheticDomainSpec};

    #[test]
    fn dump_load_round_trip() {
        let specs: Vec<SyntheticDomainSpec> = (0..2)
            .map(|i| {
                let mut s = SyntheticDomainSpec::default_domain(i, 31);
                s.train_segments = 5;
                s.test_segments = 2;
                s.segment_len_range = (18, 24);
                s
            })
            .collect();
        let domains = generate_domains(&specs, 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d1_train.ds");
        dump_dataset(&domains[0].train, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.domain_id, domains[0].train.domain_id);
        assert_eq!(loaded.class_count, domains[0].train.class_count);
        assert_eq!(loaded.segments, domains[0].train.segments);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ds");
        std::fs::write(&path, format!("{HEADER}\ndomain d1 train\nclasses 8\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Parse { .. })));
    }
}

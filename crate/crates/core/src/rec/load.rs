use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Interaction, RecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingFormat {
    /// `user \t item \t rating \t timestamp` with integer ids.
    Ml100k,
    /// `user,item,rating,timestamp` with string ids.
    AmazonCsv,
}

impl FromStr for RatingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml100k" => Ok(RatingFormat::Ml100k),
            "amazon-csv" => Ok(RatingFormat::AmazonCsv),
            other => Err(format!("unknown rating format `{other}` (expected ml100k or amazon-csv)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedRatings {
    pub interactions: Vec<Interaction>,
    /// For string-keyed formats, the original id of each dense user id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

pub fn load_ratings(path: &Path, format: RatingFormat) -> Result<LoadedRatings, RecError> {
    let file = File::open(path).map_err(|source| RecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ratings(BufReader::new(file), format)
}

struct Interner {
    ids: HashMap<String, u32>,
    names: Vec<String>,
}

impl Interner {
    fn new() -> Self {
        Interner {
            ids: HashMap::new(),
            names: Vec::new(),
        }
    }

    fn get(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.ids.get(key) {
            return id;
        }
        let id = self.names.len() as u32;
        self.ids.insert(key.to_string(), id);
        self.names.push(key.to_string());
        id
    }
}

pub fn parse_ratings<R: BufRead>(input: R, format: RatingFormat) -> Result<LoadedRatings, RecError> {
    let mut out = LoadedRatings::default();
    let (mut users, mut items) = (Interner::new(), Interner::new());
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| RecError::Format {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| RecError::Format { line: line_no, msg };
        let fields: Vec<&str> = match format {
            RatingFormat::Ml100k => line.split('\t').collect(),
            RatingFormat::AmazonCsv => line.split(',').collect(),
        };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let rating = parse_rating(fields[2]).map_err(err)?;
        let timestamp: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad timestamp `{}`", fields[3])))?;
        let (user, item) = match format {
            RatingFormat::Ml100k => {
                let id = |s: &str, what: &str| s.trim().parse::<u32>().map_err(|_| err(format!("bad {what} id `{s}`")));
                (id(fields[0], "user")?, id(fields[1], "item")?)
            }
            RatingFormat::AmazonCsv => (users.get(fields[0].trim()), items.get(fields[1].trim())),
        };
        out.interactions.push(Interaction {
            user,
            item,
            rating,
            timestamp,
        });
    }
    out.user_ids = users.names;
    out.item_ids = items.names;
    Ok(out)
}

/// Integer ratings 1..=5; `4.0` style values are accepted.
fn parse_rating(field: &str) -> Result<u8, String> {
    let v: f64 = field.trim().parse().map_err(|_| format!("bad rating `{field}`"))?;
    if v.fract() != 0.0 || !(1.0..=5.0).contains(&v) {
        return Err(format!("rating {field} outside 1..5"));
    }
    Ok(v as u8)
}

/// Two-column `dense_id,original_id` sidecar.
pub fn write_id_map(path: &Path, ids: &[String]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for (i, id) in ids.iter().enumerate() {
        writeln!(out, "{i},{id}")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ml100k_row() {
        let r = parse_ratings("196\t242\t3\t881250949\n".as_bytes(), RatingFormat::Ml100k).unwrap();
        assert_eq!(
            r.interactions,
            [Interaction {
                user: 196,
                item: 242,
                rating: 3,
                timestamp: 881250949
            }]
        );
    }

    #[test]
    fn bad_rating_names_line() {
        let text = "1\t2\t3\t10\n1\t3\t6\t11\n";
        match parse_ratings(text.as_bytes(), RatingFormat::Ml100k) {
            Err(RecError::Format { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains('6'));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let short = "1\t2\t3\n";
        assert!(matches!(
            parse_ratings(short.as_bytes(), RatingFormat::Ml100k),
            Err(RecError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn amazon_ids_are_dense() {
        let text = "A1,B9,5.0,1400000000\nA2,B9,2.0,1400000001\nA1,B7,4,1400000002\n";
        let r = parse_ratings(text.as_bytes(), RatingFormat::AmazonCsv).unwrap();
        let pairs: Vec<(u32, u32, u8)> = r.interactions.iter().map(|x| (x.user, x.item, x.rating)).collect();
        assert_eq!(pairs, [(0, 0, 5), (1, 0, 2), (0, 1, 4)]);
        assert_eq!(r.user_ids, ["A1", "A2"]);
        assert_eq!(r.item_ids, ["B9", "B7"]);
        let bad = "A1,B9,4.5,1400000000\n";
        assert!(parse_ratings(bad.as_bytes(), RatingFormat::AmazonCsv).is_err());
    }

    #[test]
    fn sidecar_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("items.csv");
        write_id_map(&p, &["x".into(), "y".into()]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "0,x\n1,y\n");
    }
}

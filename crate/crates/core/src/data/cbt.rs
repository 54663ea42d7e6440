use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PLACEHOLDER;
use crate::error::{NseError, Result};

/// Candidate count of the public CBT release.
pub const CBT_CANDIDATES: usize = 10;

/// One cloze record as whitespace-separated text tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub sentences: Vec<Vec<String>>,
    pub query: Vec<String>,
    pub answer: String,
    pub candidates: Vec<String>,
}

impl ClozeRecord {
    pub fn document(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flatten()
    }

    pub fn document_len(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn split_number(line: &str) -> Option<(usize, &str)> {
    let (num, rest) = line.split_once(' ').unwrap_or((line, ""));
    num.parse().ok().map(|n| (n, rest))
}

/// Parses records laid out as numbered context lines `1 .. N`, then a line
/// `N+1 <query>\t<answer>\t\t<c1|c2|...>`, with blank lines between records.
/// The public CBT release uses `N = 20`; shorter contexts are accepted.
pub fn parse_cbt_str(text: &str) -> Result<Vec<ClozeRecord>> {
    let mut records = Vec::new();
    let mut sentences: Vec<Vec<String>> = Vec::new();
    let mut record_start = 0;
    let mut odd_candidates = 0usize;

    let err = |record: usize, line: usize, message: String| NseError::Parse { record, line, message };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        let record = records.len() + 1;
        if line.trim().is_empty() {
            if !sentences.is_empty() {
                return Err(err(
                    record,
                    lineno,
                    format!("record starting at line {record_start} ends without a query line"),
                ));
            }
            continue;
        }
        if sentences.is_empty() {
            record_start = lineno;
        }
        let Some((num, rest)) = split_number(line) else {
            return Err(err(record, lineno, "line does not start with a line number".into()));
        };
        let expected = sentences.len() + 1;
        if num != expected {
            return Err(err(record, lineno, format!("expected line number {expected}, found {num}")));
        }
        if !rest.contains('\t') {
            sentences.push(tokens(rest));
            continue;
        }
        let fields: Vec<&str> = rest.split('\t').collect();
        if fields.len() < 3 {
            return Err(err(record, lineno, "query line needs query, answer and candidate fields".into()));
        }
        if sentences.is_empty() {
            return Err(err(record, lineno, "query line with no context".into()));
        }
        let mut query = tokens(fields[0]);
        let mut holes = 0;
        for tok in query.iter_mut() {
            if tok.eq_ignore_ascii_case(PLACEHOLDER) {
                *tok = PLACEHOLDER.to_string();
                holes += 1;
            }
        }
        if holes != 1 {
            return Err(err(record, lineno, format!("query has {holes} placeholders, expected exactly one")));
        }
        let answer = fields[1].trim().to_string();
        let candidates: Vec<String> = fields[fields.len() - 1]
            .split('|')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if answer.is_empty() || candidates.is_empty() {
            return Err(err(record, lineno, "missing answer or candidates".into()));
        }
        if !candidates.contains(&answer) {
            return Err(err(record, lineno, format!("answer {answer:?} is not among the candidates")));
        }
        if candidates.len() != CBT_CANDIDATES {
            odd_candidates += 1;
        }
        records.push(ClozeRecord {
            sentences: std::mem::take(&mut sentences),
            query,
            answer,
            candidates,
        });
    }
    if !sentences.is_empty() {
        return Err(err(
            records.len() + 1,
            record_start,
            format!("record starting at line {record_start} ends without a query line"),
        ));
    }
    if odd_candidates > 0 {
        log::warn!("{odd_candidates} of {} records do not have {CBT_CANDIDATES} candidates", records.len());
    }
    Ok(records)
}

pub fn parse_cbt_file(path: impl AsRef<Path>) -> Result<Vec<ClozeRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| NseError::io(path, e))?;
    parse_cbt_str(&text)
}

pub fn to_cbt_string(records: &[ClozeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for (i, s) in r.sentences.iter().enumerate() {
            let _ = writeln!(out, "{} {}", i + 1, s.join(" "));
        }
        let _ = writeln!(
            out,
            "{} {}\t{}\t\t{}",
            r.sentences.len() + 1,
            r.query.join(" "),
            r.answer,
            r.candidates.join("|")
        );
        out.push('\n');
    }
    out
}

pub fn write_cbt_file(path: impl AsRef<Path>, records: &[ClozeRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_cbt_string(records)).map_err(|e| NseError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(records: usize) -> String {
        let mut s = String::new();
        for r in 0..records {
            for i in 1..=20 {
                s.push_str(&format!("{i} Sentence {i} of story {r} mentions Tom and Ann .\n"));
            }
            s.push_str("21 Then XXXXX went home .\tTom\t\tAnn|Bob|Cat|Dan|Eve|Fay|Gus|Hal|Ivy|Tom\n\n");
        }
        s
    }

    #[test]
    fn parses_well_formed_fixture() {
        let recs = parse_cbt_str(&fixture(2)).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.candidates.len(), 10);
            assert_eq!(r.sentences.len(), 20);
            assert_eq!(r.answer, "Tom");
            assert_eq!(r.query, vec!["Then", "XXXXX", "went", "home", "."]);
            assert_eq!(r.document_len(), 20 * 10);
        }
    }

    #[test]
    fn missing_query_line_names_the_record() {
        let text = fixture(2);
        let mut removed = false;
        let broken: String = text
            .lines()
            .filter(|l| {
                let drop = !removed && l.starts_with("21 ");
                removed |= drop;
                !drop
            })
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_cbt_str(&broken) {
            Err(NseError::Parse { record, message, .. }) => {
                assert_eq!(record, 1);
                assert!(message.contains("without a query line"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let truncated: String = fixture(1).lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_cbt_str(&truncated), Err(NseError::Parse { record: 1, .. })));
    }

    #[test]
    fn placeholder_is_normalized_and_required() {
        let text = "1 a b .\n2 a xxxxx .\tb\t\ta|b\n\n";
        let recs = parse_cbt_str(text).unwrap();
        assert_eq!(recs[0].query[1], PLACEHOLDER);
        assert!(parse_cbt_str("1 a b .\n2 a b .\tb\t\ta|b\n\n").is_err());
    }

    #[test]
    fn bad_numbering_and_answers_are_rejected() {
        assert!(matches!(
            parse_cbt_str("1 a .\n3 XXXXX .\ta\t\ta|b\n"),
            Err(NseError::Parse { line: 2, .. })
        ));
        assert!(parse_cbt_str("1 a .\n2 XXXXX .\tz\t\ta|b\n").is_err());
        assert!(parse_cbt_str("one a .\n").is_err());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = fixture(3);
        let recs = parse_cbt_str(&text).unwrap();
        assert_eq!(to_cbt_string(&recs), text);
        assert_eq!(parse_cbt_str(&to_cbt_string(&recs)).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn arbitrary_records_round_trip(
            sentences in proptest::collection::vec(proptest::collection::vec("[a-zA-Z.,']{1,6}", 1..6), 1..5),
            pre in proptest::collection::vec("[a-z]{1,5}", 0..3),
            cands in proptest::collection::btree_set("[A-Z][a-z]{1,4}", 1..6),
        ) {
            let cands: Vec<String> = cands.into_iter().collect();
            let mut query = pre.clone();
            query.push(PLACEHOLDER.to_string());
            let rec = ClozeRecord { sentences, query, answer: cands[0].clone(), candidates: cands };
            let text = to_cbt_string(std::slice::from_ref(&rec));
            let back = parse_cbt_str(&text).unwrap();
            prop_assert_eq!(&back, &vec![rec]);
            prop_assert_eq!(to_cbt_string(&back), text);
        }
    }
}

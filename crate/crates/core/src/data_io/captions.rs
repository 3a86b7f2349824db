use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text_roles::Caption;

pub const CAPTION_HEADER: [&str; 5] = ["id", "video_id", "narration", "verb_class", "noun_classes"];

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses caption CSV text. `path` is only used in error messages.
pub fn parse_captions(text: &str, path: &Path) -> Result<Vec<Caption>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.iter().map(str::trim).ne(CAPTION_HEADER) {
        return Err(parse_err(
            path,
            1,
            format!("expected header {}", CAPTION_HEADER.join(",")),
        ));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let id = field(0);
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        let text = field(2);
        if text.is_empty() {
            return Err(parse_err(path, line, "empty narration"));
        }
        let verb_class = field(3)
            .parse::<u32>()
            .map_err(|_| parse_err(path, line, format!("bad verb_class {:?}", field(3))))?;
        let noun_classes = field(4)
            .split_whitespace()
            .map(|v| {
                v.parse::<u32>()
                    .map_err(|_| parse_err(path, line, format!("bad noun class {v:?}")))
            })
            .collect::<Result<BTreeSet<u32>>>()?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        out.push(Caption {
            id: id.to_string(),
            video_id: field(1).to_string(),
            text: text.to_string(),
            verb_class,
            noun_classes,
        });
    }
    Ok(out)
}

pub fn load_captions(path: &Path) -> Result<Vec<Caption>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions(&text, path)
}

pub fn captions_to_csv(captions: &[Caption]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing into a Vec cannot fail.
    w.write_record(CAPTION_HEADER).expect("in-memory csv write");
    for c in captions {
        let nouns: Vec<String> = c.noun_classes.iter().map(u32::to_string).collect();
        w.write_record([
            c.id.as_str(),
            c.video_id.as_str(),
            c.text.as_str(),
            &c.verb_class.to_string(),
            &nouns.join(" "),
        ])
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is UTF-8")
}

pub fn save_captions(captions: &[Caption], path: &Path) -> Result<()> {
    std::fs::write(path, captions_to_csv(captions)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "id,video_id,narration,verb_class,noun_classes\n\
        a,v1,cut the tomato,0,2\n\
        b,v1,\"wash the pan, then dry\",3,2 5\n\
        c,v2,open fridge,1,7\n";

    #[test]
    fn parses_in_file_order() {
        let caps = parse_captions(GOOD, Path::new("c.csv")).unwrap();
        assert_eq!(caps.len(), 3);
        assert_eq!(caps[0].id, "a");
        assert_eq!(caps[1].text, "wash the pan, then dry");
        assert_eq!(caps[1].noun_classes, BTreeSet::from([2, 5]));
        assert_eq!(caps[2].verb_class, 1);
        assert_eq!(parse_captions(&captions_to_csv(&caps), Path::new("c.csv")).unwrap(), caps);
    }

    #[test]
    fn duplicate_ids_are_named() {
        let text = "id,video_id,narration,verb_class,noun_classes\nx,v,a b,0,1\nx,v,c d,0,1\n";
        assert!(matches!(
            parse_captions(text, Path::new("c.csv")),
            Err(Error::DuplicateId(id)) if id == "x"
        ));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "id,video_id,narration,verb_class,noun_classes\nx,v,a b,0,1\ny,v,c d,-1,1\n";
        assert!(matches!(
            parse_captions(text, Path::new("c.csv")),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_captions("id,narration\n", Path::new("c.csv")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

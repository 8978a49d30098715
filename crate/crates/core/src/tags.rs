//! Tag schemes (BIO, BIOES), span extraction and scheme conversion.
//!
//! Conversion is span-preserving: extracting spans before and after gives
//! the same result.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Bio,
    Bioes,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(Scheme::Bio),
            "bioes" => Ok(Scheme::Bioes),
            other => Err(Error::config(format!("unknown tag scheme {other:?}"))),
        }
    }
}

/// A labeled token span: `start` inclusive, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

fn split_tag(tag: &str, token_idx: usize) -> Result<(char, &str)> {
    if tag == "O" {
        return Ok(('O', ""));
    }
    match tag.split_once('-') {
        Some((head, label)) if head.len() == 1 && !label.is_empty() => {
            Ok((head.chars().next().unwrap(), label))
        }
        _ => Err(Error::data(format!(
            "invalid tag {tag:?} at token {token_idx}"
        ))),
    }
}

/// Extract spans from a strict BIO sequence. `I-X` must continue a span of
/// the same label.
pub fn spans_from_bio(tags: &[String]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (head, label) = split_tag(tag, i)?;
        match head {
            'O' => {
                if let Some((start, lbl)) = open.take() {
                    spans.push(Span { start, end: i, label: lbl });
                }
            }
            'B' => {
                if let Some((start, lbl)) = open.take() {
                    spans.push(Span { start, end: i, label: lbl });
                }
                open = Some((i, label.to_string()));
            }
            'I' => match &open {
                Some((_, lbl)) if lbl == label => {}
                _ => {
                    return Err(Error::data(format!(
                        "invalid tag {tag:?} at token {i}: I- does not continue a span"
                    )))
                }
            },
            _ => {
                return Err(Error::data(format!(
                    "invalid tag {tag:?} at token {i} for scheme BIO"
                )))
            }
        }
    }
    if let Some((start, lbl)) = open {
        spans.push(Span { start, end: tags.len(), label: lbl });
    }
    Ok(spans)
}

/// Extract spans from a strict BIOES sequence.
pub fn spans_from_bioes(tags: &[String]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (head, label) = split_tag(tag, i)?;
        let bad = |why: &str| {
            Err(Error::data(format!("invalid tag {tag:?} at token {i}: {why}")))
        };
        match head {
            'O' => {
                if open.is_some() {
                    return bad("O inside an open span");
                }
            }
            'S' => {
                if open.is_some() {
                    return bad("S inside an open span");
                }
                spans.push(Span { start: i, end: i + 1, label: label.to_string() });
            }
            'B' => {
                if open.is_some() {
                    return bad("B inside an open span");
                }
                open = Some((i, label.to_string()));
            }
            'I' => match &open {
                Some((_, lbl)) if lbl == label => {}
                _ => return bad("I- does not continue a span"),
            },
            'E' => match open.take() {
                Some((start, lbl)) if lbl == label => {
                    spans.push(Span { start, end: i + 1, label: lbl });
                }
                _ => return bad("E- does not close a span"),
            },
            _ => return bad("unknown head for scheme BIOES"),
        }
    }
    if open.is_some() {
        return Err(Error::data(
            "invalid BIOES sequence: span still open at sentence end".to_string(),
        ));
    }
    Ok(spans)
}

pub fn extract_spans(tags: &[String], scheme: Scheme) -> Result<Vec<Span>> {
    match scheme {
        Scheme::Bio => spans_from_bio(tags),
        Scheme::Bioes => spans_from_bioes(tags),
    }
}

/// Rewrite spans into tag strings under the given scheme.
pub fn tags_from_spans(len: usize, spans: &[Span], scheme: Scheme) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for span in spans {
        match scheme {
            Scheme::Bio => {
                tags[span.start] = format!("B-{}", span.label);
                for t in tags.iter_mut().take(span.end).skip(span.start + 1) {
                    *t = format!("I-{}", span.label);
                }
            }
            Scheme::Bioes => {
                if span.end - span.start == 1 {
                    tags[span.start] = format!("S-{}", span.label);
                } else {
                    tags[span.start] = format!("B-{}", span.label);
                    for t in tags.iter_mut().take(span.end - 1).skip(span.start + 1) {
                        *t = format!("I-{}", span.label);
                    }
                    tags[span.end - 1] = format!("E-{}", span.label);
                }
            }
        }
    }
    tags
}

/// Convert one tag sequence between schemes via its spans.
pub fn convert_tags(tags: &[String], from: Scheme, to: Scheme) -> Result<Vec<String>> {
    let spans = extract_spans(tags, from)?;
    Ok(tags_from_spans(tags.len(), &spans, to))
}

/// Convert every sentence of a corpus between schemes.
pub fn convert_scheme(
    sentences: &[crate::conll::LabeledSentence],
    from: Scheme,
    to: Scheme,
) -> Result<Vec<crate::conll::LabeledSentence>> {
    sentences
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.tags = convert_tags(&s.tags, from, to)?;
            Ok(out)
        })
        .collect()
}

/// The full BIOES tag list for a set of entity types: `O` first, then
/// B/I/E/S per type in the given order.
pub fn bioes_tag_list(types: &[String]) -> Vec<String> {
    let mut tags = vec!["O".to_string()];
    for t in types {
        for head in ["B", "I", "E", "S"] {
            tags.push(format!("{head}-{t}"));
        }
    }
    tags
}

/// Entity types present in a tagged corpus, sorted.
pub fn collect_types(sentences: &[crate::conll::LabeledSentence]) -> Vec<String> {
    let mut types: Vec<String> = sentences
        .iter()
        .flat_map(|s| s.tags.iter())
        .filter(|t| *t != "O")
        .filter_map(|t| t.split_once('-').map(|(_, ty)| ty))
        .map(str::to_string)
        .collect();
    types.sort();
    types.dedup();
    types
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bio_pair_becomes_b_e() {
        let got = convert_tags(&tags(&["B-PER", "I-PER"]), Scheme::Bio, Scheme::Bioes).unwrap();
        assert_eq!(got, tags(&["B-PER", "E-PER"]));
    }

    #[test]
    fn bio_singleton_becomes_s() {
        let got = convert_tags(&tags(&["B-LOC"]), Scheme::Bio, Scheme::Bioes).unwrap();
        assert_eq!(got, tags(&["S-LOC"]));
    }

    #[test]
    fn round_trip_is_identity() {
        let original = tags(&["O", "B-PER", "I-PER", "O", "B-LOC", "B-ORG", "I-ORG", "I-ORG"]);
        let bioes = convert_tags(&original, Scheme::Bio, Scheme::Bioes).unwrap();
        let back = convert_tags(&bioes, Scheme::Bioes, Scheme::Bio).unwrap();
        assert_eq!(back, original);
    }

    #[test]
    fn conversion_preserves_spans() {
        let original = tags(&["B-PER", "I-PER", "O", "B-LOC"]);
        let before = spans_from_bio(&original).unwrap();
        let bioes = convert_tags(&original, Scheme::Bio, Scheme::Bioes).unwrap();
        let after = spans_from_bioes(&bioes).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn invalid_tag_names_token() {
        let err = spans_from_bio(&tags(&["O", "I-PER"])).unwrap_err();
        assert!(err.to_string().contains("token 1"), "{err}");
    }

    #[test]
    fn bioes_requires_closed_spans() {
        assert!(spans_from_bioes(&tags(&["B-PER"])).is_err());
        assert!(spans_from_bioes(&tags(&["B-PER", "E-LOC"])).is_err());
        assert!(spans_from_bioes(&tags(&["S-PER"])).is_ok());
    }

    #[test]
    fn tag_list_has_one_o_and_four_per_type() {
        let list = bioes_tag_list(&["LOC".to_string(), "PER".to_string()]);
        assert_eq!(list.len(), 1 + 2 * 4);
        assert_eq!(list[0], "O");
    }
}

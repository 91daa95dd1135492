//! Label inventories, BIOES segment grammar and span extraction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Segment labels `O`, `B-X`, `I-X`, `E-X`, `S-X`.
    Bioes,
    /// Every label is its own one-token segment (POS tagging).
    Plain,
}

/// Position tag of a BIOES label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    O,
    B,
    I,
    E,
    S,
}

/// A typed segment `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagScheme {
    kind: SchemeKind,
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
    types: Vec<String>,
    /// Per label: position tag and segment type.
    parsed: Vec<(Tag, usize)>,
}

fn split_label(label: &str) -> Option<(Tag, &str)> {
    if label == "O" {
        return Some((Tag::O, ""));
    }
    let (head, ty) = label.split_once('-')?;
    let tag = match head {
        "B" => Tag::B,
        "I" => Tag::I,
        "E" => Tag::E,
        "S" => Tag::S,
        _ => return None,
    };
    (!ty.is_empty()).then_some((tag, ty))
}

impl TagScheme {
    /// BIOES inventory: `O`, then `B-/I-/E-/S-` for each type in order.
    pub fn bioes<S: AsRef<str>>(types: &[S]) -> Self {
        let mut labels = Vec::with_capacity(1 + 4 * types.len());
        labels.push("O".to_string());
        for t in types {
            for p in ["B", "I", "E", "S"] {
                labels.push(format!("{p}-{}", t.as_ref()));
            }
        }
        Self::build(SchemeKind::Bioes, labels).expect("generated labels are well formed")
    }

    pub fn plain<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        Self::build(
            SchemeKind::Plain,
            labels.iter().map(|l| l.as_ref().to_string()).collect(),
        )
    }

    /// Collects the segment types appearing in `labels` (sorted) into a BIOES scheme.
    pub fn bioes_from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut types = BTreeSet::new();
        for l in labels {
            let (_, ty) = split_label(l.as_ref()).ok_or_else(|| {
                Error::UnknownLabel(alloc::vec![l.as_ref().to_string()])
            })?;
            if !ty.is_empty() {
                types.insert(ty.to_string());
            }
        }
        let types: Vec<String> = types.into_iter().collect();
        Ok(Self::bioes(&types))
    }

    fn build(kind: SchemeKind, labels: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut types: Vec<String> = Vec::new();
        let mut parsed = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label {l}")));
            }
            match kind {
                SchemeKind::Plain => {
                    types.push(l.clone());
                    parsed.push((Tag::S, i));
                }
                SchemeKind::Bioes => {
                    let (tag, ty) = split_label(l)
                        .ok_or_else(|| Error::UnknownLabel(alloc::vec![l.clone()]))?;
                    if tag == Tag::O {
                        parsed.push((Tag::O, usize::MAX));
                        continue;
                    }
                    let t = match types.iter().position(|x| x == ty) {
                        Some(t) => t,
                        None => {
                            types.push(ty.to_string());
                            types.len() - 1
                        }
                    };
                    parsed.push((tag, t));
                }
            }
        }
        if labels.is_empty() {
            return Err(Error::Config("empty label set".into()));
        }
        Ok(Self {
            kind,
            labels,
            index,
            types,
            parsed,
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Tag and type index of a label; the type is `usize::MAX` for `O`.
    pub fn tag(&self, id: usize) -> (Tag, usize) {
        self.parsed[id]
    }

    /// Segment type of a label, `None` for `O`.
    pub fn type_of(&self, id: usize) -> Option<usize> {
        match self.parsed[id] {
            (Tag::O, _) => None,
            (_, t) => Some(t),
        }
    }

    /// Label id for a tag and type (BIOES only).
    pub fn label_for(&self, tag: Tag, kind: usize) -> usize {
        match (self.kind, tag) {
            (SchemeKind::Plain, _) => kind,
            (_, Tag::O) => self.index["O"],
            (_, t) => {
                let p = match t {
                    Tag::B => "B",
                    Tag::I => "I",
                    Tag::E => "E",
                    _ => "S",
                };
                self.index[&format!("{p}-{}", self.types[kind])]
            }
        }
    }

    /// Maps label strings to ids, reporting every distinct unknown label.
    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        let mut unknown: Vec<String> = Vec::new();
        let ids = labels
            .iter()
            .map(|l| match self.id(l.as_ref()) {
                Some(i) => i,
                None => {
                    if !unknown.iter().any(|u| u == l.as_ref()) {
                        unknown.push(l.as_ref().to_string());
                    }
                    0
                }
            })
            .collect();
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(Error::UnknownLabel(unknown))
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.label(i)).collect()
    }

    /// Whether `next` may follow `prev`; `None` stands for the sentence
    /// boundary (start when `prev` is `None`, stop when `next` is `None`).
    pub fn allowed(&self, prev: Option<usize>, next: Option<usize>) -> bool {
        if self.kind == SchemeKind::Plain {
            return true;
        }
        let open = |id: usize| matches!(self.parsed[id].0, Tag::B | Tag::I);
        match (prev, next) {
            (None, None) => true,
            (None, Some(n)) => matches!(self.parsed[n].0, Tag::O | Tag::B | Tag::S),
            (Some(p), None) => !open(p),
            (Some(p), Some(n)) => {
                let (pt, pk) = self.parsed[p];
                let (nt, nk) = self.parsed[n];
                if matches!(pt, Tag::B | Tag::I) {
                    matches!(nt, Tag::I | Tag::E) && pk == nk
                } else {
                    matches!(nt, Tag::O | Tag::B | Tag::S)
                }
            }
        }
    }

    pub fn check_legal(&self, seq: &[usize]) -> Result<()> {
        let scheme = match self.kind {
            SchemeKind::Bioes => "BIOES",
            SchemeKind::Plain => "plain",
        };
        for (i, &id) in seq.iter().enumerate() {
            if id >= self.len() {
                return Err(Error::IllegalSequence {
                    scheme,
                    index: i,
                    detail: format!("label id {id} out of range"),
                });
            }
            let prev = if i == 0 { None } else { Some(seq[i - 1]) };
            if !self.allowed(prev, Some(id)) {
                return Err(Error::IllegalSequence {
                    scheme,
                    index: i,
                    detail: format!(
                        "{} cannot follow {}",
                        self.label(id),
                        prev.map_or("<start>", |p| self.label(p))
                    ),
                });
            }
        }
        if let Some(&last) = seq.last() {
            if !self.allowed(Some(last), None) {
                return Err(Error::IllegalSequence {
                    scheme,
                    index: seq.len() - 1,
                    detail: format!("{} cannot end a sentence", self.label(last)),
                });
            }
        }
        Ok(())
    }

    pub fn is_legal(&self, seq: &[usize]) -> bool {
        self.check_legal(seq).is_ok()
    }

    /// `(C+2)×(C+2)` additive mask over transitions, with the start state at
    /// index `C` and the stop state at `C+1`: `0` where allowed, `-∞` otherwise.
    pub fn transition_mask(&self) -> Vec<f64> {
        let c = self.len();
        let n = c + 2;
        let mut mask = alloc::vec![f64::NEG_INFINITY; n * n];
        for a in 0..n {
            for b in 0..n {
                let prev = match a {
                    x if x < c => Some(Some(x)),
                    x if x == c => Some(None),
                    _ => None,
                };
                let next = match b {
                    x if x < c => Some(Some(x)),
                    x if x == c + 1 => Some(None),
                    _ => None,
                };
                if let (Some(p), Some(q)) = (prev, next) {
                    if (p.is_some() || q.is_some()) && self.allowed(p, q) {
                        mask[a * n + b] = 0.0;
                    }
                }
            }
        }
        mask
    }

    /// Extracts segments with conlleval chunk-boundary rules, which also
    /// accept ill-formed sequences.
    pub fn spans(&self, seq: &[usize]) -> Vec<Span> {
        if self.kind == SchemeKind::Plain {
            return seq
                .iter()
                .enumerate()
                .map(|(i, &k)| Span {
                    start: i,
                    end: i + 1,
                    kind: k,
                })
                .collect();
        }
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize)> = None;
        let mut prev = (Tag::O, usize::MAX);
        for (i, &id) in seq.iter().enumerate() {
            let cur = self.parsed[id];
            if open.is_some() && chunk_ends(prev, cur) {
                let (s, k) = open.take().expect("open chunk");
                spans.push(Span {
                    start: s,
                    end: i,
                    kind: k,
                });
            }
            if chunk_starts(prev, cur) {
                open = Some((i, cur.1));
            }
            prev = cur;
        }
        if let Some((s, k)) = open {
            spans.push(Span {
                start: s,
                end: seq.len(),
                kind: k,
            });
        }
        spans
    }

    /// Encodes segments as a legal label sequence of length `n`.
    pub fn encode_spans(&self, spans: &[Span], n: usize) -> Vec<usize> {
        if self.kind == SchemeKind::Plain {
            let mut out = alloc::vec![0; n];
            for s in spans {
                for slot in &mut out[s.start..s.end] {
                    *slot = s.kind;
                }
            }
            return out;
        }
        let o = self.label_for(Tag::O, 0);
        let mut out = alloc::vec![o; n];
        for s in spans {
            if s.end - s.start == 1 {
                out[s.start] = self.label_for(Tag::S, s.kind);
            } else {
                out[s.start] = self.label_for(Tag::B, s.kind);
                for slot in &mut out[s.start + 1..s.end - 1] {
                    *slot = self.label_for(Tag::I, s.kind);
                }
                out[s.end - 1] = self.label_for(Tag::E, s.kind);
            }
        }
        out
    }

    /// Repairs an arbitrary sequence into a legal one with the same
    /// conlleval segmentation.
    pub fn legalize(&self, seq: &[usize]) -> Vec<usize> {
        self.encode_spans(&self.spans(seq), seq.len())
    }
}

fn chunk_ends(prev: (Tag, usize), cur: (Tag, usize)) -> bool {
    let (pt, pk) = prev;
    let (ct, ck) = cur;
    match pt {
        Tag::E | Tag::S => true,
        Tag::B | Tag::I if matches!(ct, Tag::B | Tag::S | Tag::O) => true,
        Tag::O => false,
        _ => pk != ck,
    }
}

fn chunk_starts(prev: (Tag, usize), cur: (Tag, usize)) -> bool {
    let (pt, pk) = prev;
    let (ct, ck) = cur;
    match ct {
        Tag::B | Tag::S => true,
        Tag::O => false,
        Tag::I | Tag::E => matches!(pt, Tag::E | Tag::S | Tag::O) || pk != ck,
    }
}

/// Converts a BIO2 label sequence to BIOES, keeping every segment intact.
pub fn convert_bio2_to_bioes<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    let parsed: Vec<(Tag, &str)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| match split_label(l.as_ref()) {
            Some((t @ (Tag::O | Tag::B | Tag::I), ty)) => Ok((t, ty)),
            _ => Err(Error::IllegalSequence {
                scheme: "BIO2",
                index: i,
                detail: format!("{} is not a BIO2 label", l.as_ref()),
            }),
        })
        .collect::<Result<_>>()?;
    for (i, &(t, ty)) in parsed.iter().enumerate() {
        if t == Tag::I {
            let ok = i > 0 && matches!(parsed[i - 1], (Tag::B | Tag::I, p) if p == ty);
            if !ok {
                return Err(Error::IllegalSequence {
                    scheme: "BIO2",
                    index: i,
                    detail: format!("I-{ty} does not continue a {ty} segment"),
                });
            }
        }
    }
    Ok(parsed
        .iter()
        .enumerate()
        .map(|(i, &(t, ty))| {
            let continues = matches!(parsed.get(i + 1), Some(&(Tag::I, _)));
            match t {
                Tag::O => "O".to_string(),
                Tag::B if continues => format!("B-{ty}"),
                Tag::B => format!("S-{ty}"),
                _ if continues => format!("I-{ty}"),
                _ => format!("E-{ty}"),
            }
        })
        .collect())
}

/// Converts BIOES labels back to BIO2.
pub fn convert_bioes_to_bio2<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match split_label(l.as_ref()) {
            Some((Tag::O, _)) => Ok("O".to_string()),
            Some((Tag::B | Tag::S, ty)) => Ok(format!("B-{ty}")),
            Some((Tag::I | Tag::E, ty)) => Ok(format!("I-{ty}")),
            None => Err(Error::IllegalSequence {
                scheme: "BIOES",
                index: i,
                detail: format!("{} is not a BIOES label", l.as_ref()),
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Independent BIO2 chunker: a segment opens at B-X and extends over I-X.
    fn bio2_segments(labels: &[String]) -> Vec<(usize, usize, String)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < labels.len() {
            if let Some(ty) = labels[i].strip_prefix("B-") {
                let mut j = i + 1;
                while j < labels.len() && labels[j] == format!("I-{ty}") {
                    j += 1;
                }
                out.push((i, j, ty.to_string()));
                i = j;
            } else {
                i += 1;
            }
        }
        out
    }

    #[test]
    fn bio2_conversion_examples() {
        assert_eq!(convert_bio2_to_bioes(&["B-PER"]).unwrap(), s(&["S-PER"]));
        assert_eq!(
            convert_bio2_to_bioes(&["B-PER", "I-PER"]).unwrap(),
            s(&["B-PER", "E-PER"])
        );
        assert_eq!(
            convert_bio2_to_bioes(&["B-PER", "I-PER", "I-PER", "B-PER", "O", "B-LOC"]).unwrap(),
            s(&["B-PER", "I-PER", "E-PER", "S-PER", "O", "S-LOC"])
        );
    }

    #[test]
    fn illegal_bio2_reports_index() {
        let err = convert_bio2_to_bioes(&["O", "I-PER"]).unwrap_err();
        assert!(matches!(err, Error::IllegalSequence { index: 1, .. }));
        let err = convert_bio2_to_bioes(&["B-LOC", "I-PER"]).unwrap_err();
        assert!(matches!(err, Error::IllegalSequence { index: 1, .. }));
        let err = convert_bio2_to_bioes(&["O", "O", "X-PER"]).unwrap_err();
        assert!(matches!(err, Error::IllegalSequence { index: 2, .. }));
    }

    #[test]
    fn bioes_inventory_layout() {
        let sch = TagScheme::bioes(&["PER", "LOC"]);
        assert_eq!(sch.len(), 9);
        assert_eq!(sch.label(0), "O");
        assert_eq!(sch.label(1), "B-PER");
        assert_eq!(sch.label(8), "S-LOC");
        assert_eq!(sch.label_for(Tag::E, 1), sch.id("E-LOC").unwrap());
        assert_eq!(sch.types(), &["PER".to_string(), "LOC".to_string()]);
    }

    #[test]
    fn legality_grammar() {
        let sch = TagScheme::bioes(&["PER", "LOC"]);
        let ids = |v: &[&str]| sch.encode(v).unwrap();
        assert!(sch.is_legal(&ids(&["B-PER", "I-PER", "E-PER", "O", "S-LOC"])));
        assert!(!sch.is_legal(&ids(&["I-PER"])));
        assert!(!sch.is_legal(&ids(&["B-PER", "I-LOC", "E-LOC"])));
        assert!(!sch.is_legal(&ids(&["B-PER"])));
        assert!(!sch.is_legal(&ids(&["O", "E-PER"])));
        assert!(!sch.is_legal(&ids(&["B-PER", "O"])));
        assert!(sch.is_legal(&[]));
    }

    #[test]
    fn transition_mask_matches_grammar() {
        let sch = TagScheme::bioes(&["A"]);
        let c = sch.len();
        let n = c + 2;
        let m = sch.transition_mask();
        let b = sch.id("B-A").unwrap();
        let e = sch.id("E-A").unwrap();
        let i = sch.id("I-A").unwrap();
        assert_eq!(m[c * n + b], 0.0);
        assert_eq!(m[c * n + i], f64::NEG_INFINITY);
        assert_eq!(m[b * n + (c + 1)], f64::NEG_INFINITY);
        assert_eq!(m[e * n + (c + 1)], 0.0);
        assert_eq!(m[b * n + e], 0.0);
        // nothing enters start or leaves stop
        assert!((0..n).all(|a| m[a * n + c] == f64::NEG_INFINITY));
        assert!((0..n).all(|a| m[(c + 1) * n + a] == f64::NEG_INFINITY));
    }

    #[test]
    fn unknown_labels_are_listed() {
        let sch = TagScheme::bioes(&["PER"]);
        let err = sch.encode(&["O", "B-ORG", "E-ORG", "B-ORG"]).unwrap_err();
        assert_eq!(err, Error::UnknownLabel(s(&["B-ORG", "E-ORG"])));
    }

    #[test]
    fn lenient_spans_follow_conlleval() {
        let sch = TagScheme::bioes(&["PER", "LOC"]);
        let ids = sch.encode(&["I-PER", "E-PER", "O", "B-LOC", "B-LOC", "I-PER", "S-PER"]).unwrap();
        let spans = sch.spans(&ids);
        assert_eq!(
            spans,
            vec![
                Span { start: 0, end: 2, kind: 0 },
                Span { start: 3, end: 4, kind: 1 },
                Span { start: 4, end: 5, kind: 1 },
                Span { start: 5, end: 6, kind: 0 },
                Span { start: 6, end: 7, kind: 0 },
            ]
        );
        let fixed = sch.legalize(&ids);
        assert!(sch.is_legal(&fixed));
        assert_eq!(sch.spans(&fixed), spans);
    }

    #[test]
    fn plain_scheme_spans_are_tokens() {
        let sch = TagScheme::plain(&["NN", "VB", "DT"]).unwrap();
        assert!(sch.is_legal(&[2, 0, 1]));
        assert_eq!(sch.spans(&[2, 0]).len(), 2);
        assert_eq!(sch.transition_mask().iter().filter(|v| **v == 0.0).count(), 3 * 3 + 3 + 3);
    }

    fn bio2_strategy() -> impl Strategy<Value = Vec<String>> {
        // segments: (type or O, length)
        prop::collection::vec((0usize..3, 1usize..4), 0..8).prop_map(|segs| {
            let types = ["PER", "LOC"];
            let mut out = Vec::new();
            for (t, len) in segs {
                if t == 2 {
                    out.extend(core::iter::repeat("O".to_string()).take(len));
                } else {
                    out.push(format!("B-{}", types[t]));
                    for _ in 1..len {
                        out.push(format!("I-{}", types[t]));
                    }
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn bioes_conversion_preserves_segments(labels in bio2_strategy()) {
            let bioes = convert_bio2_to_bioes(&labels).unwrap();
            let sch = TagScheme::bioes(&["PER", "LOC"]);
            let ids = sch.encode(&bioes).unwrap();
            prop_assert!(sch.is_legal(&ids));
            let expected = bio2_segments(&labels);
            let got: Vec<(usize, usize, String)> = sch
                .spans(&ids)
                .into_iter()
                .map(|sp| (sp.start, sp.end, sch.types()[sp.kind].clone()))
                .collect();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(convert_bioes_to_bio2(&bioes).unwrap(), labels);
        }

        #[test]
        fn legalize_always_yields_legal(ids in prop::collection::vec(0usize..9, 0..12)) {
            let sch = TagScheme::bioes(&["PER", "LOC"]);
            let fixed = sch.legalize(&ids);
            prop_assert!(sch.is_legal(&fixed));
            prop_assert_eq!(sch.spans(&fixed), sch.spans(&ids));
            if sch.is_legal(&ids) {
                prop_assert_eq!(fixed, ids);
            }
        }
    }
}

//! The i2b2 annotation grammar.
//!
//! ```text
//! c="chest pain" 3:1 3:2||t="problem"
//! c="chest pain" 3:1 3:2||t="problem"||a="absent"
//! c="aspirin" 5:0 5:0||r="TrAP"||c="chest pain" 5:3 5:4
//! ```
//!
//! Line numbers are 1-based, token offsets 0-based and inclusive.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Assertion, AssertionType, ConceptSpan, ConceptType, Document, Relation, RelationType};
use crate::error::CorpusError;

/// Serialized annotation files of one document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationFiles {
    pub txt: String,
    pub con: String,
    pub ast: String,
    pub rel: String,
}

struct LineCtx<'a> {
    file: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, reason: impl Into<String>) -> CorpusError {
        CorpusError::MalformedLine {
            file: self.file.to_string(),
            line: self.line,
            reason: reason.into(),
        }
    }
}

/// `key="value"` to `value`.
fn field<'a>(ctx: &LineCtx, part: &'a str, key: &str) -> Result<&'a str, CorpusError> {
    part.trim()
        .strip_prefix(key)
        .and_then(|s| s.strip_prefix("=\""))
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(|| ctx.err(format!("expected {key}=\"...\", found `{}`", part.trim())))
}

fn position(ctx: &LineCtx, s: &str) -> Result<(usize, usize), CorpusError> {
    let (l, t) = s
        .split_once(':')
        .ok_or_else(|| ctx.err(format!("bad offset `{s}`")))?;
    let l: usize = l.parse().map_err(|_| ctx.err(format!("bad line number `{l}`")))?;
    let t: usize = t.parse().map_err(|_| ctx.err(format!("bad token offset `{t}`")))?;
    if l == 0 {
        return Err(ctx.err("line numbers are 1-based"));
    }
    Ok((l - 1, t))
}

/// `c="text" L:S L:E` to (quoted text, sentence, start, end).
fn concept_ref<'a>(ctx: &LineCtx, part: &'a str) -> Result<(&'a str, usize, usize, usize), CorpusError> {
    let part = part.trim();
    let body = part
        .strip_prefix("c=\"")
        .ok_or_else(|| ctx.err(format!("expected c=\"...\", found `{part}`")))?;
    let close = body.rfind('"').ok_or_else(|| ctx.err("unterminated concept text"))?;
    let text = &body[..close];
    let mut offs = body[close + 1..].split_whitespace();
    let (Some(a), Some(b), None) = (offs.next(), offs.next(), offs.next()) else {
        return Err(ctx.err("expected two offsets after the concept text"));
    };
    let (l1, s) = position(ctx, a)?;
    let (l2, e) = position(ctx, b)?;
    if l1 != l2 {
        return Err(ctx.err("concept spans more than one line"));
    }
    Ok((text, l1, s, e))
}

fn normalized(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

struct Parser<'d> {
    doc_id: &'d str,
    sentences: &'d [Vec<String>],
}

impl Parser<'_> {
    fn span(&self, ctx: &LineCtx, part: &str, ctype: ConceptType) -> Result<ConceptSpan, CorpusError> {
        let (text, sent, start, end) = concept_ref(ctx, part)?;
        let tokens = self.sentences.get(sent).ok_or_else(|| CorpusError::IndexOutOfRange {
            doc: self.doc_id.to_string(),
            detail: format!("{}:{}: line {} of {}", ctx.file, ctx.line, sent + 1, self.sentences.len()),
        })?;
        if start > end || end >= tokens.len() {
            return Err(CorpusError::IndexOutOfRange {
                doc: self.doc_id.to_string(),
                detail: format!(
                    "{}:{}: tokens {start}..={end} on a line of {} tokens",
                    ctx.file,
                    ctx.line,
                    tokens.len()
                ),
            });
        }
        let found = tokens[start..=end].join(" ");
        if normalized(text) != found.to_lowercase() {
            return Err(CorpusError::ConceptTextMismatch {
                doc: self.doc_id.to_string(),
                quoted: text.to_string(),
                found,
            });
        }
        Ok(ConceptSpan::new(sent, start, end, ctype))
    }

    fn concept_line(&self, ctx: &LineCtx, line: &str) -> Result<ConceptSpan, CorpusError> {
        let parts: Vec<&str> = line.split("||").collect();
        if parts.len() != 2 {
            return Err(ctx.err(format!("expected 2 fields, found {}", parts.len())));
        }
        let ctype: ConceptType = field(ctx, parts[1], "t")?
            .parse()
            .map_err(|e: CorpusError| ctx.err(e.to_string()))?;
        self.span(ctx, parts[0], ctype)
    }

    fn find(&self, concepts: &[ConceptSpan], probe: ConceptSpan, what: &str) -> Result<ConceptSpan, CorpusError> {
        concepts
            .iter()
            .copied()
            .find(|c| c.same_extent(&probe))
            .ok_or_else(|| CorpusError::DanglingAnnotation {
                doc: self.doc_id.to_string(),
                detail: format!("{what} refers to absent concept at line {} tokens {}..={}", probe.sent + 1, probe.start, probe.end),
            })
    }
}

fn lines(src: &str) -> impl Iterator<Item = (usize, &str)> {
    src.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Split report text into whitespace-tokenized sentences, one per line.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

/// Parse one report and its `.con`, `.ast` and `.rel` annotation files.
///
/// Relations whose concepts sit on different lines are dropped with a
/// warning; everything else that does not fit the grammar or the
/// document's invariants is an error.
pub fn parse_document(doc_id: &str, text: &str, con: &str, ast: &str, rel: &str) -> Result<Document, CorpusError> {
    let sentences = tokenize(text);
    let parser = Parser {
        doc_id,
        sentences: &sentences,
    };
    let con_name = format!("{doc_id}.con");
    let ast_name = format!("{doc_id}.ast");
    let rel_name = format!("{doc_id}.rel");

    let mut concepts = Vec::new();
    for (line, l) in lines(con) {
        let ctx = LineCtx { file: &con_name, line };
        concepts.push(parser.concept_line(&ctx, l)?);
    }

    let mut assertions = Vec::new();
    for (line, l) in lines(ast) {
        let ctx = LineCtx { file: &ast_name, line };
        let parts: Vec<&str> = l.split("||").collect();
        if parts.len() != 3 {
            return Err(ctx.err(format!("expected 3 fields, found {}", parts.len())));
        }
        let ctype: ConceptType = field(&ctx, parts[1], "t")?
            .parse()
            .map_err(|e: CorpusError| ctx.err(e.to_string()))?;
        let label: AssertionType = field(&ctx, parts[2], "a")?
            .parse()
            .map_err(|e: CorpusError| ctx.err(e.to_string()))?;
        let probe = parser.span(&ctx, parts[0], ctype)?;
        let concept = parser.find(&concepts, probe, "assertion")?;
        if concept.ctype != ConceptType::Problem || ctype != ConceptType::Problem {
            return Err(CorpusError::AssertionOnNonProblem {
                doc: doc_id.to_string(),
                detail: format!("{ast_name}:{line}"),
            });
        }
        assertions.push(Assertion { concept, label });
    }

    let mut relations = Vec::new();
    let mut cross_sentence = 0usize;
    for (line, l) in lines(rel) {
        let ctx = LineCtx { file: &rel_name, line };
        let parts: Vec<&str> = l.split("||").collect();
        if parts.len() != 3 {
            return Err(ctx.err(format!("expected 3 fields, found {}", parts.len())));
        }
        let label: RelationType = field(&ctx, parts[1], "r")?
            .parse()
            .map_err(|e: CorpusError| ctx.err(e.to_string()))?;
        let subject = parser.span(&ctx, parts[0], ConceptType::Problem)?;
        let object = parser.span(&ctx, parts[2], ConceptType::Problem)?;
        let subject = parser.find(&concepts, subject, "relation")?;
        let object = parser.find(&concepts, object, "relation")?;
        if subject.sent != object.sent {
            cross_sentence += 1;
            continue;
        }
        relations.push(Relation {
            subject,
            label,
            object,
        });
    }
    if cross_sentence > 0 {
        log::warn!("{doc_id}: dropped {cross_sentence} cross-sentence relation(s)");
    }

    let mut doc = Document {
        id: doc_id.to_string(),
        sentences,
        concepts,
        assertions,
        relations,
    };
    doc.validate(true)?;
    doc.normalize();
    Ok(doc)
}

fn concept_text(doc: &Document, c: &ConceptSpan) -> String {
    doc.sentences[c.sent][c.start..=c.end].join(" ").to_lowercase()
}

fn concept_ref_text(doc: &Document, c: &ConceptSpan) -> String {
    format!(
        "c=\"{}\" {}:{} {}:{}",
        concept_text(doc, c),
        c.sent + 1,
        c.start,
        c.sent + 1,
        c.end
    )
}

/// Emit the text and annotation files, annotations sorted by line and then
/// start offset.
pub fn serialize_document(doc: &Document) -> AnnotationFiles {
    let mut doc = doc.clone();
    doc.normalize();
    let mut out = AnnotationFiles::default();
    for s in &doc.sentences {
        out.txt.push_str(&s.join(" "));
        out.txt.push('\n');
    }
    for c in &doc.concepts {
        out.con
            .push_str(&format!("{}||t=\"{}\"\n", concept_ref_text(&doc, c), c.ctype));
    }
    for a in &doc.assertions {
        out.ast.push_str(&format!(
            "{}||t=\"{}\"||a=\"{}\"\n",
            concept_ref_text(&doc, &a.concept),
            a.concept.ctype,
            a.label
        ));
    }
    for r in &doc.relations {
        out.rel.push_str(&format!(
            "{}||r=\"{}\"||{}\n",
            concept_ref_text(&doc, &r.subject),
            r.label,
            concept_ref_text(&doc, &r.object)
        ));
    }
    out
}

fn read_optional(path: &Path) -> Result<String, CorpusError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
        Err(source) => Err(CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

/// First existing `<dir>/<sub>/<id>.<ext>` among the candidate
/// subdirectories, falling back to `<dir>/<id>.<ext>`.
fn locate(dir: &Path, subdirs: &[&str], id: &str, ext: &str) -> PathBuf {
    let name = format!("{id}.{ext}");
    subdirs
        .iter()
        .map(|s| dir.join(s).join(&name))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(name))
}

/// Load every `<id>.txt` report of a directory. Both a flat layout and the
/// i2b2 distribution layout (`txt/`, `concept/`, `ast/`, `rel/`) are
/// accepted; missing annotation files count as empty.
pub fn load_corpus(dir: &Path, jobs: usize) -> Result<Vec<Document>, CorpusError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let txt_dir = if dir.join("txt").is_dir() { dir.join("txt") } else { dir.to_path_buf() };
    let mut ids: Vec<String> = fs::read_dir(&txt_dir)
        .map_err(io_err(&txt_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();

    let load = |id: &String| -> Result<Document, CorpusError> {
        let txt_path = txt_dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&txt_path).map_err(io_err(&txt_path))?;
        let con = read_optional(&locate(dir, &["concept", "concepts"], id, "con"))?;
        let ast = read_optional(&locate(dir, &["ast"], id, "ast"))?;
        let rel = read_optional(&locate(dir, &["rel"], id, "rel"))?;
        parse_document(id, &text, &con, &ast, &rel)
    };

    let jobs = jobs.max(1).min(ids.len().max(1));
    if jobs == 1 {
        return ids.iter().map(load).collect();
    }
    let chunk = ids.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(load).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut docs = Vec::with_capacity(ids.len());
        for h in handles {
            docs.extend(h.join().expect("parser thread panicked")?);
        }
        Ok(docs)
    })
}

/// Write documents in the flat layout read by [`load_corpus`].
pub fn write_corpus(dir: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for doc in docs {
        let files = serialize_document(doc);
        for (ext, body) in [("txt", &files.txt), ("con", &files.con), ("ast", &files.ast), ("rel", &files.rel)] {
            let path = dir.join(format!("{}.{ext}", doc.id));
            fs::write(&path, body).map_err(|source| CorpusError::Io { path, source })?;
        }
    }
    Ok(())
}

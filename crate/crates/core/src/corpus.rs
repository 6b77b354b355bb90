//! Tweet ingestion: JSON-lines parsing, corpus selection and text normalization.
//!
//! Normalization performs exactly two substitutions. URLs become `<url>` and
//! user mentions become `<usr>`. Everything else (emoji, misspellings,
//! punctuation, spacing) is kept byte-for-byte.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const URL_TOKEN: &str = "<url>";
pub const USER_TOKEN: &str = "<usr>";

/// Longest handle Twitter accepts.
pub const MAX_HANDLE_LEN: usize = 15;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An ingested tweet record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTweet {
    pub id: String,
    pub text: String,
    pub lang: String,
    pub author_id: Option<String>,
    pub created_at: Option<String>,
}

/// Names of the JSON keys each [`RawTweet`] field is read from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub id: String,
    pub text: String,
    pub lang: String,
    pub author_id: String,
    pub created_at: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: "text".into(),
            lang: "lang".into(),
            author_id: "author_id".into(),
            created_at: "created_at".into(),
        }
    }
}

/// Normalized tweet text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CleanText(String);

impl CleanText {
    /// Wraps text that is already normalized (e.g. read back from a corpus file).
    pub fn from_normalized(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CleanText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Parses one JSON-lines record using the default field names.
pub fn parse_tweet_record(line: &str) -> Result<RawTweet, CorpusError> {
    parse_tweet_record_with(line, 1, &FieldMap::default())
}

/// Parses one JSON-lines record. `line_no` is 1-based and only used in errors.
pub fn parse_tweet_record_with(
    line: &str,
    line_no: usize,
    fields: &FieldMap,
) -> Result<RawTweet, CorpusError> {
    let value: Value = serde_json::from_str(line).map_err(|source| CorpusError::Parse {
        line: line_no,
        source,
    })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Schema {
        line: line_no,
        message: "record is not a JSON object".into(),
    })?;

    let field = |key: &str| -> Result<Option<String>, CorpusError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            // numeric ids are common in dumps
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(other) => Err(CorpusError::Schema {
                line: line_no,
                message: format!("field `{key}` has unsupported type: {other}"),
            }),
        }
    };
    let required = |key: &str| -> Result<String, CorpusError> {
        match field(key)? {
            Some(s) if !s.is_empty() => Ok(s),
            Some(_) => Err(CorpusError::Schema {
                line: line_no,
                message: format!("field `{key}` is empty"),
            }),
            None => Err(CorpusError::Schema {
                line: line_no,
                message: format!("missing required field `{key}`"),
            }),
        }
    };

    Ok(RawTweet {
        id: required(&fields.id)?,
        text: required(&fields.text)?,
        lang: required(&fields.lang)?,
        author_id: field(&fields.author_id)?,
        created_at: field(&fields.created_at)?,
    })
}

/// Streams tweets out of a JSON-lines reader, skipping blank lines.
pub fn read_tweets<'a, R: BufRead + 'a>(
    reader: R,
    fields: &'a FieldMap,
) -> impl Iterator<Item = Result<RawTweet, CorpusError>> + 'a {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| match line {
            Err(e) => Some(Err(CorpusError::Io(e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(parse_tweet_record_with(&l, idx + 1, fields)),
        })
}

/// Selection rule with the default language (`es`).
pub fn select_for_corpus(tweet: &RawTweet) -> bool {
    select_for_corpus_lang(tweet, "es")
}

/// Keeps a tweet iff its language tag matches and it has at least one
/// non-URL token after normalization.
pub fn select_for_corpus_lang(tweet: &RawTweet, lang: &str) -> bool {
    tweet.lang == lang && !is_url_only(&preprocess_text(&tweet.text))
}

/// True when the text holds nothing but `<url>` tokens and whitespace.
pub fn is_url_only(text: &CleanText) -> bool {
    text.as_str()
        .split_whitespace()
        .all(|tok| is_repeated(tok, URL_TOKEN))
}

fn is_repeated(tok: &str, unit: &str) -> bool {
    let mut rest = tok;
    while let Some(r) = rest.strip_prefix(unit) {
        rest = r;
    }
    rest.is_empty()
}

/// A byte range of the input recognized as a URL or a mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Span {
    Url(usize, usize),
    Mention(usize, usize),
}

impl Span {
    pub fn range(&self) -> (usize, usize) {
        match *self {
            Span::Url(s, e) | Span::Mention(s, e) => (s, e),
        }
    }

    fn replacement(&self) -> &'static str {
        match self {
            Span::Url(..) => URL_TOKEN,
            Span::Mention(..) => USER_TOKEN,
        }
    }
}

fn is_handle_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Characters that may not directly precede a mention's `@`.
fn blocks_mention_before(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || "!#$%&*@".contains(c)
}

/// Characters that may not directly follow a mention's handle.
fn blocks_mention_after(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '@'
}

fn url_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut search = 0;
    while search < text.len() {
        let rest = &text[search..];
        let hit = [rest.find("http://"), rest.find("https://")]
            .into_iter()
            .flatten()
            .min();
        let Some(off) = hit else { break };
        let start = search + off;
        let end = text[start..]
            .find(char::is_whitespace)
            .map_or(text.len(), |e| start + e);
        spans.push((start, end));
        search = end;
    }
    spans
}

/// Finds the URL and mention spans [`preprocess_text`] replaces, in order.
///
/// URLs are matched first: from `http://` or `https://` to the next
/// whitespace. Mentions are matched in the text outside URLs: an `@` at the
/// start or after a boundary character, followed by 1 to 15 handle
/// characters that are not themselves followed by a letter, digit, `_` or `@`.
pub fn find_spans(text: &str) -> Vec<Span> {
    let urls = url_spans(text);
    let mut spans = Vec::new();
    let mut cursor = 0;
    for &(us, ue) in urls.iter().chain(std::iter::once(&(text.len(), text.len()))) {
        find_mentions(text, cursor, us, &mut spans);
        if us < ue {
            spans.push(Span::Url(us, ue));
        }
        cursor = ue;
    }
    spans
}

fn find_mentions(text: &str, from: usize, to: usize, out: &mut Vec<Span>) {
    let seg = &text[from..to];
    for (off, c) in seg.char_indices() {
        if c != '@' {
            continue;
        }
        let at = from + off;
        // Boundary is judged on the original text, which keeps the
        // substitution idempotent.
        if let Some(prev) = text[..at].chars().next_back() {
            if blocks_mention_before(prev) {
                continue;
            }
        }
        let handle_len = seg[off + 1..]
            .chars()
            .take_while(|&ch| is_handle_char(ch))
            .count();
        if handle_len == 0 || handle_len > MAX_HANDLE_LEN {
            continue;
        }
        let end = at + 1 + handle_len;
        // Judged inside the segment: a handle running straight into a URL
        // stops where the URL begins.
        if let Some(next) = text[end..to].chars().next() {
            if blocks_mention_after(next) {
                continue;
            }
        }
        out.push(Span::Mention(at, end));
    }
}

/// Replaces URLs with `<url>` and mentions with `<usr>`; all other bytes are
/// copied through untouched.
pub fn preprocess_text(text: &str) -> CleanText {
    let spans = find_spans(text);
    if spans.is_empty() {
        return CleanText(text.to_owned());
    }
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for span in &spans {
        let (s, e) = span.range();
        out.push_str(&text[cursor..s]);
        out.push_str(span.replacement());
        cursor = e;
    }
    out.push_str(&text[cursor..]);
    CleanText(out)
}

/// Counts reported by [`filter_corpus`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub read: usize,
    pub kept: usize,
    pub wrong_lang: usize,
    pub url_only: usize,
}

/// Reads tweets, applies the selection rule and writes one normalized text
/// per line. Newlines inside a tweet are folded to spaces so the output stays
/// line-oriented.
pub fn filter_corpus<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    lang: &str,
    fields: &FieldMap,
) -> Result<FilterStats, CorpusError> {
    let mut stats = FilterStats::default();
    for tweet in read_tweets(reader, fields) {
        let tweet = tweet?;
        stats.read += 1;
        if tweet.lang != lang {
            stats.wrong_lang += 1;
            continue;
        }
        let clean = preprocess_text(&tweet.text);
        if is_url_only(&clean) {
            stats.url_only += 1;
            continue;
        }
        let line = clean.as_str().replace(['\n', '\r'], " ");
        writeln!(writer, "{line}")?;
        stats.kept += 1;
    }
    writer.flush()?;
    Ok(stats)
}

/// Reads a corpus file written by [`filter_corpus`]: one text per line,
/// blank lines skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<CleanText>, CorpusError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(CleanText(line));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tweet(lang: &str, text: &str) -> RawTweet {
        RawTweet {
            id: "1".into(),
            text: text.into(),
            lang: lang.into(),
            author_id: None,
            created_at: None,
        }
    }

    #[test]
    fn parses_minimal_record() {
        let t = parse_tweet_record(r#"{"id":"1","text":"hola","lang":"es"}"#).unwrap();
        assert_eq!(t.id, "1");
        assert_eq!(t.text, "hola");
        assert_eq!(t.lang, "es");
        assert_eq!(t.author_id, None);
        assert_eq!(t.created_at, None);
    }

    #[test]
    fn numeric_id_is_accepted() {
        let t = parse_tweet_record(r#"{"id":42,"text":"x","lang":"es","author_id":7}"#).unwrap();
        assert_eq!(t.id, "42");
        assert_eq!(t.author_id.as_deref(), Some("7"));
    }

    #[test]
    fn missing_text_is_schema_error() {
        let err = parse_tweet_record(r#"{"id":"2","lang":"es"}"#).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { .. }), "{err}");
        let err = parse_tweet_record(r#"{"id":"2","text":"a"}"#).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { .. }), "{err}");
    }

    #[test]
    fn garbage_is_parse_error_with_line() {
        let err = parse_tweet_record_with("not json {", 17, &FieldMap::default()).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 17),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn field_map_renames_keys() {
        let fields = FieldMap {
            id: "id_str".into(),
            text: "full_text".into(),
            ..FieldMap::default()
        };
        let t = parse_tweet_record_with(
            r#"{"id_str":"9","full_text":"hola","lang":"es"}"#,
            1,
            &fields,
        )
        .unwrap();
        assert_eq!(t.text, "hola");
    }

    #[test]
    fn selection_rules() {
        assert!(select_for_corpus(&tweet("es", "hola mundo")));
        assert!(!select_for_corpus(&tweet("en", "hola")));
        assert!(!select_for_corpus(&tweet("es", "https://t.co/abc")));
        assert!(!select_for_corpus(&tweet("es", "  https://t.co/a   http://b.c ")));
        assert!(select_for_corpus(&tweet("es", "mira https://t.co/abc")));
        assert!(select_for_corpus(&tweet("es", "@ana https://t.co/abc")));
    }

    #[test]
    fn replaces_urls_and_mentions() {
        assert_eq!(
            preprocess_text("@maria hola https://t.co/x 😀").as_str(),
            "<usr> hola <url> 😀"
        );
        assert_eq!(preprocess_text("sin menciones").as_str(), "sin menciones");
    }

    #[test]
    fn mention_boundary_cases() {
        // (input, expected) built by hand from the boundary rule
        let cases = [
            ("correo a@b", "correo a@b"),
            ("@a", "<usr>"),
            ("(@pepe)", "(<usr>)"),
            ("hola,@pepe!", "hola,<usr>!"),
            ("RT @pepe: hola", "RT <usr>: hola"),
            ("#@pepe", "#@pepe"),
            ("@@pepe", "@@pepe"),
            ("@ @pepe", "@ <usr>"),
            ("@pepe@luis", "@pepe@luis"),
            ("@josé", "@josé"),
            ("@", "@"),
            ("@ solo", "@ solo"),
            ("@abcdefghijklmno", "<usr>"),
            ("@abcdefghijklmnop", "@abcdefghijklmnop"),
            ("@pepe_99.", "<usr>."),
            ("😀@pepe", "😀<usr>"),
            ("@pepehttp://x.y", "<usr><url>"),
            ("https://x.com/@pepe", "<url>"),
            ("xhttp://a b", "x<url> b"),
            ("http://", "<url>"),
        ];
        for (input, expected) in cases {
            assert_eq!(preprocess_text(input).as_str(), expected, "input {input:?}");
        }
    }

    #[test]
    fn filter_writes_selected_lines() {
        let input = concat!(
            r#"{"id":"1","text":"hola @ana","lang":"es"}"#,
            "\n\n",
            r#"{"id":"2","text":"hello","lang":"en"}"#,
            "\n",
            r#"{"id":"3","text":"https://t.co/z","lang":"es"}"#,
            "\n",
            r#"{"id":"4","text":"dos\nlineas","lang":"es"}"#,
            "\n"
        );
        let mut out = Vec::new();
        let stats = filter_corpus(input.as_bytes(), &mut out, "es", &FieldMap::default()).unwrap();
        assert_eq!(
            stats,
            FilterStats {
                read: 4,
                kept: 2,
                wrong_lang: 1,
                url_only: 1
            }
        );
        assert_eq!(String::from_utf8(out).unwrap(), "hola <usr>\ndos lineas\n");
    }

    #[test]
    fn filter_reports_bad_line_number() {
        let input = "{\"id\":\"1\",\"text\":\"a\",\"lang\":\"es\"}\n{oops\n";
        let err = filter_corpus(input.as_bytes(), Vec::new(), "es", &FieldMap::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    fn tweetish() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            Just("@".to_string()),
            Just("@ana".to_string()),
            Just("http://".to_string()),
            Just("https://t.co/".to_string()),
            Just(" ".to_string()),
            Just("😀".to_string()),
            Just("<usr>".to_string()),
            Just("é".to_string()),
            "[a-z_!#.,:()]{1,4}",
            "[A-Za-z0-9_]{1,18}",
        ];
        prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
    }

    /// Removes the given spans (or the replacement tokens) to compare the
    /// untouched remainder.
    fn strip_spans(text: &str, spans: &[Span]) -> String {
        let mut out = String::new();
        let mut cursor = 0;
        for s in spans {
            let (a, b) = s.range();
            out.push_str(&text[cursor..a]);
            cursor = b;
        }
        out.push_str(&text[cursor..]);
        out
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(s in tweetish()) {
            let once = preprocess_text(&s);
            let twice = preprocess_text(once.as_str());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn output_has_no_url_or_mention(s in tweetish()) {
            let out = preprocess_text(&s);
            prop_assert!(!out.as_str().contains("http://"));
            prop_assert!(!out.as_str().contains("https://"));
            prop_assert!(find_spans(out.as_str()).is_empty());
        }

        #[test]
        fn untouched_bytes_are_preserved(s in tweetish()) {
            prop_assume!(!s.contains('<'));
            let spans = find_spans(&s);
            let out = preprocess_text(&s);
            let kept_out = out.as_str().replace(USER_TOKEN, "").replace(URL_TOKEN, "");
            prop_assert_eq!(strip_spans(&s, &spans), kept_out);
        }

        #[test]
        fn url_only_text_is_never_selected(n in 1usize..4, ws in "[ \t]{1,3}") {
            let text = vec!["https://t.co/abc"; n].join(&ws);
            prop_assert!(!select_for_corpus(&tweet("es", &text)));
        }
    }
}

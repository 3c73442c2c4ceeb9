//! Front end for model-written `SELECT * FROM entity_graph_table WHERE ...`
//! statements. Only conjunctions of `column op literal` are understood; the
//! result is lowered into a [`GraphQueryIntent`] and the ladder takes over
//! from there.

use super::intent::GraphQueryIntent;
use crate::error::{Error, Result};
use crate::model::{EntityType, RelationType};
use crate::time::{DayTime, MAX_HHMMSS};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Str(String),
    Int(i64),
    Op(String),
    LParen,
    RParen,
    Star,
    Comma,
    Semi,
}

fn tokenize(sql: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '\'' | '"' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(Error::validation("unterminated string literal in SQL")),
                        Some(&ch) if ch == quote => {
                            if chars.get(i + 1) == Some(&quote) {
                                s.push(quote);
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token::Str(s));
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            ';' => {
                out.push(Token::Semi);
                i += 1;
            }
            '=' | '<' | '>' | '!' => {
                let pair: String = chars[i..(i + 2).min(chars.len())].iter().collect();
                if matches!(pair.as_str(), ">=" | "<=" | "!=" | "<>" | "==") {
                    out.push(Token::Op(pair));
                    i += 2;
                } else {
                    out.push(Token::Op(c.to_string()));
                    i += 1;
                }
            }
            c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Token::Int(s.parse().map_err(|_| Error::validation(format!("bad integer {s}")))?));
            }
            c if c.is_alphabetic() || c == '_' || c == '`' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '`') {
                    i += 1;
                }
                let w: String = chars[start..i].iter().filter(|c| **c != '`').collect();
                out.push(Token::Word(w));
            }
            other => return Err(Error::validation(format!("unexpected character {other:?} in SQL"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Token::Word(w)) if w.eq_ignore_ascii_case(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.keyword(kw) {
            Ok(())
        } else {
            Err(Error::validation(format!("expected {kw} in SQL, found {:?}", self.peek())))
        }
    }

    /// `col`, `lower(col)`, `trim(col)` or nested combinations.
    fn column(&mut self) -> Result<String> {
        match self.next() {
            Some(Token::Word(w)) if matches!(self.peek(), Some(Token::LParen)) => {
                if !["lower", "upper", "trim"].iter().any(|f| w.eq_ignore_ascii_case(f)) {
                    return Err(Error::validation(format!("unsupported SQL function {w}")));
                }
                self.pos += 1;
                let col = self.column()?;
                match self.next() {
                    Some(Token::RParen) => Ok(col),
                    other => Err(Error::validation(format!("expected ) in SQL, found {other:?}"))),
                }
            }
            Some(Token::Word(w)) => Ok(w.to_ascii_lowercase()),
            other => Err(Error::validation(format!("expected column in SQL, found {other:?}"))),
        }
    }
}

#[derive(Debug)]
enum Literal {
    Int(i64),
    Str(String),
}

/// Parses one statement and lowers its conjunctive WHERE clause.
///
/// `LIKE '%x%'` on an id column becomes the id `x` (the ladder's substring
/// stage covers the partial match); `LIKE` on `transcript` becomes the
/// evidence filter; `day <= n` is treated as the query-day cap and
/// dropped; `start_t >=` / `end_t <=` form the time range.
pub fn parse_where_clause(sql: &str, query_time: DayTime) -> Result<GraphQueryIntent> {
    let mut p = Parser {
        toks: tokenize(sql)?,
        pos: 0,
    };
    p.expect_keyword("SELECT")?;
    if !matches!(p.next(), Some(Token::Star)) {
        return Err(Error::validation("only SELECT * is supported"));
    }
    p.expect_keyword("FROM")?;
    match p.next() {
        Some(Token::Word(t)) if t == super::TABLE_NAME => {}
        other => return Err(Error::validation(format!("unknown table {other:?}"))),
    }

    let mut intent = GraphQueryIntent::new(query_time);
    let mut lo = None;
    let mut hi = None;
    if p.keyword("WHERE") {
        loop {
            let col = p.column()?;
            let op = match p.next() {
                Some(Token::Op(op)) => op,
                Some(Token::Word(w)) if w.eq_ignore_ascii_case("LIKE") => "LIKE".to_string(),
                other => return Err(Error::validation(format!("expected operator after {col}, found {other:?}"))),
            };
            let lit = match p.next() {
                Some(Token::Int(n)) => Literal::Int(n),
                Some(Token::Str(s)) => Literal::Str(s),
                other => return Err(Error::validation(format!("expected literal after {col} {op}, found {other:?}"))),
            };
            apply(&mut intent, &mut lo, &mut hi, &col, &op, lit)?;
            if !p.keyword("AND") {
                break;
            }
        }
    }
    // Trailing ORDER BY / LIMIT are accepted and ignored.
    if p.keyword("ORDER") {
        p.expect_keyword("BY")?;
        while matches!(p.peek(), Some(Token::Word(_)) | Some(Token::Comma)) {
            if matches!(p.peek(), Some(Token::Word(w)) if w.eq_ignore_ascii_case("LIMIT")) {
                break;
            }
            p.pos += 1;
        }
    }
    if p.keyword("LIMIT") {
        p.next();
    }
    while matches!(p.peek(), Some(Token::Semi)) {
        p.pos += 1;
    }
    if let Some(t) = p.peek() {
        return Err(Error::validation(format!("unsupported SQL near {t:?}")));
    }
    if lo.is_some() || hi.is_some() {
        intent.time_range = Some((lo.unwrap_or(0), hi.unwrap_or(MAX_HHMMSS)));
    }
    intent.validate()?;
    Ok(intent)
}

fn apply(
    intent: &mut GraphQueryIntent,
    lo: &mut Option<u32>,
    hi: &mut Option<u32>,
    col: &str,
    op: &str,
    lit: Literal,
) -> Result<()> {
    let unsupported = || Error::validation(format!("unsupported condition on {col} with {op}"));
    let int = |l: &Literal| match l {
        Literal::Int(n) if *n >= 0 => Ok(*n as u32),
        _ => Err(Error::validation(format!("{col} needs a non-negative integer"))),
    };
    let text = |l: Literal| -> Result<String> {
        Ok(match l {
            Literal::Str(s) => s,
            Literal::Int(n) => n.to_string(),
        })
    };
    let unlike = |s: String| s.trim_matches('%').replace('%', " ").trim().to_string();
    match (col, op) {
        ("day", "=" | "==") => intent.day = Some(int(&lit)?),
        ("day", "<=" | "<") => {}
        ("start_t", ">=" | ">") => *lo = Some(int(&lit)?),
        ("end_t", "<=" | "<") => *hi = Some(int(&lit)?),
        ("source_id", "=" | "==") => intent.source_id = Some(text(lit)?),
        ("source_id", "LIKE") => intent.source_id = Some(unlike(text(lit)?)),
        ("target_id", "=" | "==") => intent.target_id = Some(text(lit)?),
        ("target_id", "LIKE") => intent.target_id = Some(unlike(text(lit)?)),
        ("source_type", "=" | "==") => intent.source_type = Some(EntityType::parse_lenient(&text(lit)?)?),
        ("target_type", "=" | "==") => intent.target_type = Some(EntityType::parse_lenient(&text(lit)?)?),
        ("rel_type", "=" | "==") => intent.rel = Some(RelationType::parse_lenient(&text(lit)?)?),
        ("transcript", "LIKE" | "=" | "==") => intent.evidence_substring = Some(unlike(text(lit)?)),
        _ => return Err(unsupported()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::at;

    #[test]
    fn lowers_a_strict_statement() {
        let sql = "SELECT * FROM entity_graph_table WHERE day = 2 AND start_t >= 155000 AND end_t <= 160700 \
                   AND source_type = 'Person' AND rel_type = 'TALKS_TO' AND LOWER(target_id) LIKE '%alice%' \
                   ORDER BY day, start_t LIMIT 20;";
        let i = parse_where_clause(sql, at(3, 0)).unwrap();
        assert_eq!(i.day, Some(2));
        assert_eq!(i.time_range, Some((155000, 160700)));
        assert_eq!(i.source_type, Some(EntityType::Person));
        assert_eq!(i.rel, Some(RelationType::TalksTo));
        assert_eq!(i.target_id.as_deref(), Some("alice"));
    }

    #[test]
    fn escaped_quotes_and_day_cap() {
        let sql = "SELECT * FROM entity_graph_table WHERE day <= 6 AND target_id = 'Katrina''s luggage'";
        let i = parse_where_clause(sql, at(6, 0)).unwrap();
        assert_eq!(i.day, None);
        assert_eq!(i.target_id.as_deref(), Some("Katrina's luggage"));
    }

    #[test]
    fn rejects_what_it_cannot_lower() {
        let q = at(6, 0);
        assert!(parse_where_clause("SELECT transcript FROM entity_graph_table WHERE day = 1", q).is_err());
        assert!(parse_where_clause("SELECT * FROM other WHERE rel_type = 'USES'", q).is_err());
        assert!(parse_where_clause("SELECT * FROM entity_graph_table WHERE rel_type = 'USES' OR day = 1", q).is_err());
        assert!(parse_where_clause("SELECT * FROM entity_graph_table WHERE day = 1", q).is_err());
        assert!(parse_where_clause("SELECT * FROM entity_graph_table WHERE rel_type = 'LIKES'", q).is_err());
    }

    #[test]
    fn rendered_predicates_parse_back_for_exact_stages() {
        use crate::graph::StagePredicate;
        let mut i = GraphQueryIntent::new(at(6, 0));
        i.day = Some(2);
        i.time_range = Some((100000, 120000));
        i.rel = Some(RelationType::Uses);
        i.source_id = Some("jake".into());
        let sql = StagePredicate::strict(&i).render();
        let back = parse_where_clause(&sql, at(6, 0)).unwrap();
        assert_eq!(back, i);
    }
}

//! BuildScript parsing.
//!
//! ```text
//! # comment
//! SET out "a b"
//! READ src/x.c -> text
//! WRITE out/x.o $text
//! SPAWN c1 tools/cc.bsh x.c tmp/x.s < input.txt > |p
//! WAIT c1 -> code
//! IF-CONTAINS x.c "main" {
//!   EXIT 1
//! }
//! ```

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// A token. Unquoted words expand `$name`, `${name}` and `$@`; quoted
/// words are literal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub quoted: bool,
}

impl Word {
    pub fn lit(s: &str) -> Word {
        Word { text: s.to_string(), quoted: false }
    }
}

/// Source or destination of a data transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Port {
    Path(Word),
    Pipe(String),
    Stdin,
    Stdout,
}

pub type Block = Arc<Vec<Instr>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    Set { var: String, value: Vec<Word> },
    Read { src: Port, var: Option<String> },
    Write { dst: Port, value: Vec<Word>, append: bool },
    Stat { path: Word },
    List { path: Word, var: Option<String> },
    Mkdir { path: Word },
    Rm { path: Word },
    Symlink { dest: Word, name: Word },
    Glob { pattern: Word, var: String },
    Pipe { name: String },
    Close { port: Port },
    Spawn { id: String, exe: Word, args: Vec<Word>, stdin: Option<Port>, stdout: Option<Port> },
    Wait { id: String, var: Option<String> },
    Exit { code: Word },
    IfContains { path: Word, needle: Word, body: Block },
    IfEq { a: Word, b: Word, negate: bool, body: Block },
    For { var: String, words: Vec<Word>, body: Block },
    Tmpfile { var: String, suffix: Option<Word> },
    HashCopy { srcs: Vec<Word>, dst: Word },
}

pub fn tokenize(line: &str) -> Result<Vec<Word>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        if c == '#' {
            break;
        }
        if c == '"' {
            chars.next();
            let mut s = String::new();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        Some('"') => s.push('"'),
                        Some('\\') => s.push('\\'),
                        Some(o) => {
                            s.push('\\');
                            s.push(o);
                        }
                        None => return Err("dangling escape".into()),
                    },
                    o => s.push(o),
                }
            }
            if !closed {
                return Err("unterminated string".into());
            }
            out.push(Word { text: s, quoted: true });
        } else {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                s.push(c);
                chars.next();
            }
            out.push(Word { text: s, quoted: false });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    lines: Vec<(usize, Vec<Word>)>,
    pos: usize,
    _src: &'a str,
}

pub fn parse(src: &str) -> Result<Vec<Instr>, ParseError> {
    let mut lines = Vec::new();
    for (i, l) in src.lines().enumerate() {
        let toks = tokenize(l).map_err(|msg| ParseError { line: i + 1, msg })?;
        if !toks.is_empty() {
            lines.push((i + 1, toks));
        }
    }
    let mut p = Parser { lines, pos: 0, _src: src };
    let body = p.block(false)?;
    Ok(body)
}

fn name_of(w: &Word, line: usize) -> Result<String, ParseError> {
    let ok = !w.quoted
        && !w.text.is_empty()
        && w.text.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if ok {
        Ok(w.text.clone())
    } else {
        Err(ParseError { line, msg: format!("bad name {:?}", w.text) })
    }
}

fn port_of(w: &Word) -> Port {
    if !w.quoted {
        if let Some(p) = w.text.strip_prefix('|') {
            return Port::Pipe(p.to_string());
        }
        if w.text == "@stdin" {
            return Port::Stdin;
        }
        if w.text == "@stdout" {
            return Port::Stdout;
        }
    }
    Port::Path(w.clone())
}

/// Splits `... -> var` into the words before the arrow and the variable.
fn arrow(toks: &[Word], line: usize) -> Result<(&[Word], Option<String>), ParseError> {
    match toks.iter().position(|w| !w.quoted && w.text == "->") {
        Some(i) => {
            if i + 2 != toks.len() {
                return Err(ParseError { line, msg: "expected one name after ->".into() });
            }
            Ok((&toks[..i], Some(name_of(&toks[i + 1], line)?)))
        }
        None => Ok((toks, None)),
    }
}

impl Parser<'_> {
    fn block(&mut self, nested: bool) -> Result<Vec<Instr>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.lines.len() {
            let (line, toks) = self.lines[self.pos].clone();
            self.pos += 1;
            if toks.len() == 1 && !toks[0].quoted && toks[0].text == "}" {
                if nested {
                    return Ok(out);
                }
                return Err(ParseError { line, msg: "unmatched }".into() });
            }
            out.push(self.instr(line, &toks)?);
        }
        if nested {
            let line = self.lines.last().map(|l| l.0).unwrap_or(0);
            return Err(ParseError { line, msg: "missing }".into() });
        }
        Ok(out)
    }

    fn body(&mut self, line: usize, toks: &[Word]) -> Result<(Vec<Word>, Block), ParseError> {
        let Some(last) = toks.last() else {
            return Err(ParseError { line, msg: "missing {".into() });
        };
        if last.quoted || last.text != "{" {
            return Err(ParseError { line, msg: "block must end with {".into() });
        }
        let head = toks[..toks.len() - 1].to_vec();
        let body = self.block(true)?;
        Ok((head, Arc::new(body)))
    }

    fn instr(&mut self, line: usize, toks: &[Word]) -> Result<Instr, ParseError> {
        let err = |msg: &str| ParseError { line, msg: msg.to_string() };
        let kw = &toks[0];
        if kw.quoted {
            return Err(err("expected an instruction"));
        }
        let rest = &toks[1..];
        let need = |n: usize| -> Result<(), ParseError> {
            if rest.len() == n {
                Ok(())
            } else {
                Err(ParseError { line, msg: format!("{} takes {n} operand(s)", kw.text) })
            }
        };
        Ok(match kw.text.as_str() {
            "SET" => {
                if rest.is_empty() {
                    return Err(err("SET needs a name"));
                }
                Instr::Set { var: name_of(&rest[0], line)?, value: rest[1..].to_vec() }
            }
            "READ" => {
                let (ops, var) = arrow(rest, line)?;
                if ops.len() != 1 {
                    return Err(err("READ takes one source"));
                }
                let src = port_of(&ops[0]);
                if src == Port::Stdout {
                    return Err(err("cannot READ @stdout"));
                }
                Instr::Read { src, var }
            }
            "WRITE" | "APPEND" => {
                if rest.is_empty() {
                    return Err(err("missing destination"));
                }
                let dst = port_of(&rest[0]);
                if dst == Port::Stdin {
                    return Err(err("cannot write @stdin"));
                }
                Instr::Write { dst, value: rest[1..].to_vec(), append: kw.text == "APPEND" }
            }
            "STAT" => {
                need(1)?;
                Instr::Stat { path: rest[0].clone() }
            }
            "LIST" => {
                let (ops, var) = arrow(rest, line)?;
                if ops.len() != 1 {
                    return Err(err("LIST takes one directory"));
                }
                Instr::List { path: ops[0].clone(), var }
            }
            "MKDIR" => {
                need(1)?;
                Instr::Mkdir { path: rest[0].clone() }
            }
            "RM" => {
                need(1)?;
                Instr::Rm { path: rest[0].clone() }
            }
            "SYMLINK" => {
                need(2)?;
                Instr::Symlink { dest: rest[0].clone(), name: rest[1].clone() }
            }
            "GLOB" => {
                let (ops, var) = arrow(rest, line)?;
                match (ops, var) {
                    ([p], Some(var)) => Instr::Glob { pattern: p.clone(), var },
                    _ => return Err(err("usage: GLOB pattern -> var")),
                }
            }
            "PIPE" => {
                need(1)?;
                Instr::Pipe { name: name_of(&rest[0], line)? }
            }
            "CLOSE" => {
                need(1)?;
                match port_of(&rest[0]) {
                    Port::Path(_) => return Err(err("CLOSE takes |pipe, @stdin or @stdout")),
                    port => Instr::Close { port },
                }
            }
            "SPAWN" => {
                if rest.len() < 2 {
                    return Err(err("usage: SPAWN id script args..."));
                }
                let id = name_of(&rest[0], line)?;
                let exe = rest[1].clone();
                let mut args = Vec::new();
                let mut stdin = None;
                let mut stdout = None;
                let mut i = 2;
                while i < rest.len() {
                    let w = &rest[i];
                    if !w.quoted && (w.text == "<" || w.text == ">") {
                        let Some(t) = rest.get(i + 1) else {
                            return Err(err("redirection needs a target"));
                        };
                        let port = port_of(t);
                        if matches!(port, Port::Stdin | Port::Stdout) {
                            return Err(err("bad redirection target"));
                        }
                        if w.text == "<" {
                            stdin = Some(port);
                        } else {
                            stdout = Some(port);
                        }
                        i += 2;
                    } else {
                        args.push(w.clone());
                        i += 1;
                    }
                }
                Instr::Spawn { id, exe, args, stdin, stdout }
            }
            "WAIT" => {
                let (ops, var) = arrow(rest, line)?;
                if ops.len() != 1 {
                    return Err(err("WAIT takes one id"));
                }
                Instr::Wait { id: name_of(&ops[0], line)?, var }
            }
            "EXIT" => {
                need(1)?;
                Instr::Exit { code: rest[0].clone() }
            }
            "IF-CONTAINS" => {
                let (head, body) = self.body(line, rest)?;
                if head.len() != 2 {
                    return Err(err("usage: IF-CONTAINS path text {"));
                }
                Instr::IfContains { path: head[0].clone(), needle: head[1].clone(), body }
            }
            "IF-EQ" | "IF-NE" => {
                let (head, body) = self.body(line, rest)?;
                if head.len() != 2 {
                    return Err(err("usage: IF-EQ a b {"));
                }
                Instr::IfEq { a: head[0].clone(), b: head[1].clone(), negate: kw.text == "IF-NE", body }
            }
            "FOR" => {
                let (head, body) = self.body(line, rest)?;
                if head.len() < 2 || head[1].quoted || head[1].text != "IN" {
                    return Err(err("usage: FOR v IN words {"));
                }
                Instr::For { var: name_of(&head[0], line)?, words: head[2..].to_vec(), body }
            }
            "TMPFILE" => match rest {
                [v] => Instr::Tmpfile { var: name_of(v, line)?, suffix: None },
                [v, s] => Instr::Tmpfile { var: name_of(v, line)?, suffix: Some(s.clone()) },
                _ => return Err(err("usage: TMPFILE var [suffix]")),
            },
            "HASHCOPY" => {
                if rest.len() < 2 {
                    return Err(err("usage: HASHCOPY src... dst"));
                }
                Instr::HashCopy {
                    srcs: rest[..rest.len() - 1].to_vec(),
                    dst: rest[rest.len() - 1].clone(),
                }
            }
            other => return Err(err(&format!("unknown instruction {other}"))),
        })
    }
}

/// The deterministic stand-in for a compiler stage: strips `//` comments,
/// trailing blanks and empty lines, then digests what is left.
pub fn hashcopy_output(input: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(input);
    let mut kept = String::new();
    for line in text.lines() {
        let code = match line.find("//") {
            Some(i) => &line[..i],
            None => line,
        };
        let code = code.trim_end();
        if !code.is_empty() {
            kept.push_str(code);
            kept.push('\n');
        }
    }
    format!("H {}\n", blake3::hash(kept.as_bytes()).to_hex()).into_bytes()
}

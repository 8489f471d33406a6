//! Parser for decompiled-bytecode text and the IR the detectors run on.
//!
//! The grammar covers the statement shapes the analysis consumes: storage
//! declarations, function definitions, delegatecall statements (with folded
//! `funct`/`gas`/`args` continuation lines), external/static calls,
//! assignments, caller guards, returns and reverts. Anything else is kept as
//! an `Other` statement rather than dropped, so parsing is total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{selector_of, Address, Selector, StorageSlot};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty contract: no storage section and no functions")]
    EmptyContract,
}

/// Inferred type of a storage variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Addr,
    Uint,
    Mapping(Box<ValueType>),
    Array(Box<ValueType>),
    Struct,
    Other,
}

impl ValueType {
    pub fn is_mapping(&self) -> bool {
        matches!(self, ValueType::Mapping(_))
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, ValueType::Mapping(_) | ValueType::Array(_))
    }

    fn parse(text: &str) -> ValueType {
        let t = text.trim();
        if let Some(rest) = t.strip_prefix("mapping of ") {
            return ValueType::Mapping(Box::new(ValueType::parse(rest)));
        }
        if let Some(rest) = t.strip_prefix("array of ") {
            return ValueType::Array(Box::new(ValueType::parse(rest)));
        }
        if t == "addr" || t == "address" {
            return ValueType::Addr;
        }
        if t.starts_with("uint") || t.starts_with("int") {
            return ValueType::Uint;
        }
        if t.starts_with("struct") {
            return ValueType::Struct;
        }
        ValueType::Other
    }
}

/// One inferred storage variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageDecl {
    pub name: String,
    pub slot: StorageSlot,
    pub value_type: ValueType,
    pub line: u32,
}

/// A function parameter as written in the decompiled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub ty: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatementKind {
    Delegatecall {
        target_expr: String,
        selector_expr: Option<String>,
        args_expr: Option<String>,
    },
    ExternalCall {
        callee_expr: String,
        selector: Option<Selector>,
        is_static: bool,
        outputs: Vec<String>,
    },
    Assignment {
        lvalue: String,
        rvalue: String,
    },
    CallerGuard {
        comparison: String,
    },
    Return {
        expr: String,
    },
    Revert,
    Other,
}

/// One parsed statement, carrying its folded source text and 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub kind: StatementKind,
    pub line: u32,
    pub text: String,
}

/// One public/external function (decompiled output exposes only these).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDef {
    pub name: String,
    pub selector: Option<Selector>,
    pub params: Vec<Param>,
    pub body: Vec<Statement>,
    pub start_line: u32,
}

impl FunctionDef {
    pub fn is_fallback(&self) -> bool {
        self.name == "_fallback"
    }

    /// `upgradeTo(address)` for named functions; `None` for the fallback and
    /// `unknownXXXXXXXX` stubs whose selector comes from the name itself.
    pub fn canonical_signature(&self) -> Option<String> {
        if self.is_fallback() || unknown_name_selector(&self.name).is_some() {
            return None;
        }
        let types: Vec<String> = self.params.iter().map(|p| canonical_type(&p.ty)).collect();
        Some(format!("{}({})", self.name, types.join(",")))
    }

    /// Signature text when derivable, else the bare function name. This is
    /// what upgrade evidence records.
    pub fn signature_or_name(&self) -> String {
        self.canonical_signature().unwrap_or_else(|| self.name.clone())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}

fn canonical_type(ty: &str) -> String {
    match ty {
        "addr" => "address".to_string(),
        "uint" => "uint256".to_string(),
        "int" => "int256".to_string(),
        other => other.to_string(),
    }
}

fn unknown_name_selector(name: &str) -> Option<Selector> {
    let hex = name.strip_prefix("unknown")?;
    if hex.len() == 8 && hex.chars().all(|c| c.is_ascii_hexdigit()) {
        Selector::parse(hex).ok()
    } else {
        None
    }
}

/// How a relevant delegatecall resolves its target address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DelegateTarget {
    /// Index into [`DecompiledContract::storage`].
    StorageVariable(usize),
    /// Statement index (same function body) of the preceding external call
    /// whose return data feeds the delegation.
    ExternalFetch(usize),
    HardcodedAddress(Address),
}

/// How the delegated function selector is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorMode {
    /// The first four calldata bytes are forwarded unchanged.
    CalldataForwarded,
    /// A hard-coded selector equal to the enclosing function's own selector.
    HardcodedMatching(Selector),
}

/// A delegatecall statement satisfying both proxy properties at the IR level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelegatecallSite {
    pub function_index: usize,
    pub statement_index: usize,
    pub line: u32,
    pub target: DelegateTarget,
    pub selector_mode: SelectorMode,
}

/// Parsed view of one decompiled source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompiledContract {
    pub storage: Vec<StorageDecl>,
    pub functions: Vec<FunctionDef>,
    pub raw_lines: Vec<String>,
}

impl DecompiledContract {
    pub fn parse(text: &str) -> Result<DecompiledContract, ParseError> {
        parse(text)
    }

    pub fn function(&self, index: usize) -> &FunctionDef {
        &self.functions[index]
    }

    /// Storage lookup by the identifier used in expressions. Packed slots may
    /// expose several typed views under one name; the `addr` view wins since
    /// that is the one holding a contract address.
    pub fn storage_by_name(&self, name: &str) -> Option<usize> {
        let mut first = None;
        for (i, decl) in self.storage.iter().enumerate() {
            if decl.name == name {
                if decl.value_type == ValueType::Addr {
                    return Some(i);
                }
                first.get_or_insert(i);
            }
        }
        first
    }

    pub fn max_integer_slot(&self) -> Option<u64> {
        self.storage
            .iter()
            .filter_map(|d| match d.slot.kind {
                crate::model::SlotKind::Integer(n) => Some(n),
                _ => None,
            })
            .max()
    }

    pub fn min_integer_slot(&self) -> Option<u64> {
        self.storage
            .iter()
            .filter_map(|d| match d.slot.kind {
                crate::model::SlotKind::Integer(n) => Some(n),
                _ => None,
            })
            .min()
    }

    /// (other-kind statements, total statements) across all functions.
    pub fn other_statement_counts(&self) -> (usize, usize) {
        let mut other = 0;
        let mut total = 0;
        for f in &self.functions {
            for s in &f.body {
                total += 1;
                if s.kind == StatementKind::Other {
                    other += 1;
                }
            }
        }
        (other, total)
    }
}

/// Unwrap cast wrappers (`addr(x)`, `uint256(x)`) and field/index suffixes to
/// the leading identifier of an expression.
pub fn base_ident(expr: &str) -> Option<&str> {
    let mut e = expr.trim();
    loop {
        if let (Some(open), true) = (e.find('('), e.ends_with(')')) {
            if is_cast_head(&e[..open]) {
                e = e[open + 1..e.len() - 1].trim();
                continue;
            }
        }
        break;
    }
    let end = e
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(e.len());
    let ident = &e[..end];
    if ident.is_empty() {
        None
    } else {
        Some(ident)
    }
}

fn is_cast_head(head: &str) -> bool {
    matches!(head, "addr" | "address" | "bool")
        || head.starts_with("uint")
        || head.starts_with("int")
        || head.starts_with("bytes")
}

/// Find a bare 20-byte hex literal (`0x` + 40 hex digits) inside an
/// expression, the decompiled mirror of a PUSH20-embedded address.
pub fn hardcoded_address_literal(expr: &str) -> Option<Address> {
    let bytes = expr.as_bytes();
    let mut i = 0;
    while let Some(pos) = expr[i..].find("0x") {
        let start = i + pos;
        let hex_start = start + 2;
        let mut end = hex_start;
        while end < bytes.len() && bytes[end].is_ascii_hexdigit() {
            end += 1;
        }
        if end - hex_start == 40 {
            return Address::parse(&expr[start..end]).ok();
        }
        i = end.max(start + 2);
    }
    None
}

/// Extract every delegatecall satisfying both proxy properties: the call
/// forwards the first four calldata bytes (or a hard-coded selector equal to
/// the enclosing function's own), and the target resolves to a storage
/// variable, a preceding external fetch, or a hard-coded address.
pub fn relevant_delegatecalls(contract: &DecompiledContract) -> Vec<DelegatecallSite> {
    let mut sites = Vec::new();
    for (fi, func) in contract.functions.iter().enumerate() {
        for (si, stmt) in func.body.iter().enumerate() {
            let StatementKind::Delegatecall { target_expr, selector_expr, .. } = &stmt.kind else {
                continue;
            };
            let Some(mode) = classify_selector_mode(selector_expr.as_deref(), func) else {
                continue;
            };
            let Some(target) = classify_target(contract, func, si, target_expr) else {
                continue;
            };
            sites.push(DelegatecallSite {
                function_index: fi,
                statement_index: si,
                line: stmt.line,
                target,
                selector_mode: mode,
            });
        }
    }
    sites
}

fn classify_selector_mode(selector_expr: Option<&str>, func: &FunctionDef) -> Option<SelectorMode> {
    let expr = selector_expr?.trim();
    if expr == "call.data[0 len 4]" || expr == "call.data[return_data.size len 4]" {
        return Some(SelectorMode::CalldataForwarded);
    }
    if let Some(hex) = expr.strip_prefix("0x") {
        if hex.len() == 8 {
            let sel = Selector::parse(hex).ok()?;
            if func.selector == Some(sel) {
                return Some(SelectorMode::HardcodedMatching(sel));
            }
        }
    }
    None
}

fn classify_target(
    contract: &DecompiledContract,
    func: &FunctionDef,
    stmt_index: usize,
    target_expr: &str,
) -> Option<DelegateTarget> {
    if let Some(addr) = hardcoded_address_literal(target_expr) {
        return Some(DelegateTarget::HardcodedAddress(addr));
    }
    if let Some(ident) = base_ident(target_expr) {
        if let Some(idx) = contract.storage_by_name(ident) {
            return Some(DelegateTarget::StorageVariable(idx));
        }
    }
    if target_expr.contains("ext_call.return_data") {
        let preceding = func.body[..stmt_index]
            .iter()
            .rposition(|s| matches!(s.kind, StatementKind::ExternalCall { .. }))?;
        return Some(DelegateTarget::ExternalFetch(preceding));
    }
    None
}

/// All assignments whose left operand resolves to the given storage variable,
/// as (function index, statement index) pairs in source order.
pub fn assignments_to(contract: &DecompiledContract, decl: &StorageDecl) -> Vec<(usize, usize)> {
    let mut hits = Vec::new();
    for (fi, func) in contract.functions.iter().enumerate() {
        for (si, stmt) in func.body.iter().enumerate() {
            if let StatementKind::Assignment { lvalue, .. } = &stmt.kind {
                if base_ident(lvalue) == Some(decl.name.as_str()) {
                    hits.push((fi, si));
                }
            }
        }
    }
    hits
}

/// Whether a caller comparison appears in the enclosing function strictly
/// before the delegatecall site.
pub fn caller_guard_before(contract: &DecompiledContract, site: &DelegatecallSite) -> bool {
    let func = &contract.functions[site.function_index];
    func.body
        .iter()
        .any(|s| matches!(s.kind, StatementKind::CallerGuard { .. }) && s.line < site.line)
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Strip a trailing `# comment`, ignoring `#` inside single-quoted strings.
fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '#' if !in_quote => return line[..i].trim_end(),
            _ => {}
        }
    }
    line.trim_end()
}

fn parse(text: &str) -> Result<DecompiledContract, ParseError> {
    let raw_lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    let mut storage: Vec<StorageDecl> = Vec::new();
    let mut functions: Vec<FunctionDef> = Vec::new();

    let mut i = 0;
    while i < raw_lines.len() {
        let line = strip_comment(&raw_lines[i]);
        let trimmed = line.trim_start();
        if trimmed.is_empty() || indent_of(line) > 0 {
            i += 1;
            continue;
        }
        if trimmed == "def storage:" {
            i += 1;
            while i < raw_lines.len() {
                let body_line = strip_comment(&raw_lines[i]);
                if body_line.trim().is_empty() {
                    i += 1;
                    continue;
                }
                if indent_of(body_line) == 0 {
                    break;
                }
                if let Some(decl) = parse_storage_decl(body_line.trim(), (i + 1) as u32) {
                    merge_storage_decl(&mut storage, decl);
                }
                i += 1;
            }
            continue;
        }
        if let Some(header) = trimmed.strip_prefix("def ") {
            let start_line = (i + 1) as u32;
            let (name, params) = parse_def_header(header);
            i += 1;
            let mut body = Vec::new();
            while i < raw_lines.len() {
                let body_line = strip_comment(&raw_lines[i]);
                if body_line.trim().is_empty() {
                    i += 1;
                    continue;
                }
                if indent_of(body_line) == 0 {
                    break;
                }
                let (stmt, consumed) = parse_statement(&raw_lines, i);
                body.push(stmt);
                i += consumed;
            }
            let selector = unknown_name_selector(&name).or_else(|| {
                let draft = FunctionDef {
                    name: name.clone(),
                    selector: None,
                    params: params.clone(),
                    body: Vec::new(),
                    start_line,
                };
                draft.canonical_signature().and_then(|sig| selector_of(&sig).ok())
            });
            functions.push(FunctionDef { name, selector, params, body, start_line });
            continue;
        }
        i += 1;
    }

    if storage.is_empty() && functions.is_empty() {
        return Err(ParseError::EmptyContract);
    }
    Ok(DecompiledContract { storage, functions, raw_lines })
}

/// `name is <type> at storage <slot> [offset <bits>]`
fn parse_storage_decl(line: &str, line_no: u32) -> Option<StorageDecl> {
    let (name, rest) = line.split_once(" is ")?;
    let (type_text, loc) = rest.rsplit_once(" at storage ")?;
    let mut tokens = loc.split_whitespace();
    let slot_token = tokens.next()?;
    let mut slot = StorageSlot::parse_token(slot_token)?;
    if let (Some("offset"), Some(bits)) = (tokens.next(), tokens.next()) {
        slot = slot.with_offset(bits.parse().ok()?);
    }
    let name = name.trim();
    if name.is_empty() || name.contains(char::is_whitespace) {
        return None;
    }
    Some(StorageDecl {
        name: name.to_string(),
        slot,
        value_type: ValueType::parse(type_text),
        line: line_no,
    })
}

fn merge_storage_decl(storage: &mut Vec<StorageDecl>, decl: StorageDecl) {
    if let Some(existing) = storage
        .iter_mut()
        .find(|d| d.name == decl.name && d.slot.same_slot_and_offset(&decl.slot))
    {
        // duplicate typed views of one slot: keep the addr view when present
        if existing.value_type != ValueType::Addr && decl.value_type == ValueType::Addr {
            existing.value_type = decl.value_type;
        }
        return;
    }
    storage.push(decl);
}

fn parse_def_header(header: &str) -> (String, Vec<Param>) {
    let header = header.trim_end_matches(':').trim();
    let Some(open) = header.find('(') else {
        return (header.to_string(), Vec::new());
    };
    let name = header[..open].trim().to_string();
    let close = matching_paren(header, open).unwrap_or(header.len().saturating_sub(1));
    let params_text = &header[open + 1..close];
    let params = split_top_level(params_text, ',')
        .into_iter()
        .filter_map(|p| {
            let p = p.trim();
            if p.is_empty() {
                return None;
            }
            match p.rsplit_once(' ') {
                Some((ty, name)) => {
                    Some(Param { ty: ty.trim().to_string(), name: name.trim().to_string() })
                }
                None => Some(Param { ty: p.to_string(), name: String::new() }),
            }
        })
        .collect();
    (name, params)
}

fn matching_paren(text: &str, open: usize) -> Option<usize> {
    let mut depth = 0;
    for (i, c) in text.char_indices().skip(open) {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

/// Parse one statement starting at `index`, returning it and the number of
/// physical lines consumed (continuation lines of call statements fold in).
fn parse_statement(raw_lines: &[String], index: usize) -> (Statement, usize) {
    let line_no = (index + 1) as u32;
    let stripped = strip_comment(&raw_lines[index]);
    let trimmed = stripped.trim();

    if let Some(rest) = trimmed.strip_prefix("delegate ") {
        let target_expr = rest
            .strip_suffix("with:")
            .map(|t| t.trim())
            .unwrap_or(rest.trim())
            .to_string();
        let (fields, consumed, folded) = fold_call_continuations(raw_lines, index);
        let kind = StatementKind::Delegatecall {
            target_expr,
            selector_expr: fields.funct,
            args_expr: fields.args,
        };
        return (Statement { kind, line: line_no, text: folded }, consumed);
    }

    let (is_static, call_rest) = if let Some(rest) = trimmed.strip_prefix("static call ") {
        (true, Some(rest))
    } else if let Some(rest) = trimmed.strip_prefix("call ") {
        (false, Some(rest))
    } else {
        (false, None)
    };
    if let Some(rest) = call_rest {
        let expr = rest.strip_suffix("with:").map(|t| t.trim()).unwrap_or(rest.trim());
        let (callee_expr, selector) = split_callee(expr);
        let (_, consumed, folded) = fold_call_continuations(raw_lines, index);
        let kind =
            StatementKind::ExternalCall { callee_expr, selector, is_static, outputs: Vec::new() };
        return (Statement { kind, line: line_no, text: folded }, consumed);
    }

    let kind = if let Some(cond) = trimmed.strip_prefix("if ") {
        let cond = cond.trim_end_matches(':');
        if is_caller_comparison(cond) {
            StatementKind::CallerGuard { comparison: cond.trim().to_string() }
        } else {
            StatementKind::Other
        }
    } else if let Some(cond) = trimmed.strip_prefix("require ") {
        if is_caller_comparison(cond) {
            StatementKind::CallerGuard { comparison: cond.trim().to_string() }
        } else {
            StatementKind::Other
        }
    } else if trimmed == "return" {
        StatementKind::Return { expr: String::new() }
    } else if let Some(expr) = trimmed.strip_prefix("return ") {
        StatementKind::Return { expr: expr.trim().to_string() }
    } else if trimmed == "revert" || trimmed.starts_with("revert ") || trimmed.starts_with("revert(") {
        StatementKind::Revert
    } else if let Some((lvalue, rvalue)) = split_assignment(trimmed) {
        StatementKind::Assignment { lvalue, rvalue }
    } else {
        StatementKind::Other
    };
    (Statement { kind, line: line_no, text: trimmed.to_string() }, 1)
}

struct CallFields {
    funct: Option<String>,
    args: Option<String>,
}

/// Fold the `funct`/`gas`/`args`/`value` continuation lines of a call-style
/// statement into it. Returns the parsed fields, lines consumed, and the
/// joined text.
fn fold_call_continuations(raw_lines: &[String], index: usize) -> (CallFields, usize, String) {
    let head = strip_comment(&raw_lines[index]);
    let head_indent = indent_of(head);
    let mut fields = CallFields { funct: None, args: None };
    let mut text = head.trim().to_string();
    let mut consumed = 1;
    let mut j = index + 1;
    while j < raw_lines.len() {
        let line = strip_comment(&raw_lines[j]);
        let t = line.trim();
        if t.is_empty() {
            break;
        }
        if indent_of(line) <= head_indent {
            break;
        }
        let is_continuation = ["funct ", "gas ", "args ", "value "]
            .iter()
            .any(|p| t.starts_with(p))
            || t == "gas gas_remaining wei";
        if !is_continuation {
            break;
        }
        if let Some(expr) = t.strip_prefix("funct ") {
            fields.funct = Some(expr.trim().to_string());
        } else if let Some(expr) = t.strip_prefix("args ") {
            fields.args = Some(expr.trim().to_string());
        }
        text.push(' ');
        text.push_str(t);
        consumed += 1;
        j += 1;
    }
    (fields, consumed, text)
}

/// `callee.0xselector` or `callee.name(args)` into (callee expr, selector).
fn split_callee(expr: &str) -> (String, Option<Selector>) {
    if let Some(dot) = expr.rfind('.') {
        let tail = &expr[dot + 1..];
        if let Some(hex) = tail.strip_prefix("0x") {
            if hex.len() >= 8 && hex[..8].chars().all(|c| c.is_ascii_hexdigit()) {
                return (expr[..dot].to_string(), Selector::parse(&hex[..8]).ok());
            }
        }
        if let Some(open) = tail.find('(') {
            let name = &tail[..open];
            if !name.is_empty() && tail.ends_with(')') {
                // resolve a named call's selector only when zero-arg; typed
                // args are not recoverable from the call site
                let inner = &tail[open + 1..tail.len() - 1];
                if inner.trim().is_empty() {
                    let sel = selector_of(&format!("{name}()")).ok();
                    return (expr[..dot].to_string(), sel);
                }
                return (expr[..dot].to_string(), None);
            }
        }
    }
    (expr.to_string(), None)
}

fn is_caller_comparison(cond: &str) -> bool {
    if !(cond.contains("==") || cond.contains("!=")) {
        return false;
    }
    cond.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|tok| tok == "caller")
}

const STATEMENT_KEYWORDS: &[&str] = &[
    "if", "else", "while", "require", "return", "revert", "delegate", "call", "static",
    "continue", "break", "stop", "selfdestruct", "log", "idx", "for",
];

fn split_assignment(line: &str) -> Option<(String, String)> {
    let first_word = line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).next()?;
    if STATEMENT_KEYWORDS.contains(&first_word) {
        return None;
    }
    let bytes = line.as_bytes();
    let mut depth = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' | b'[' => depth += 1,
            b')' | b']' => depth -= 1,
            b'=' if depth == 0 => {
                let prev = if i > 0 { bytes[i - 1] } else { b' ' };
                let next = if i + 1 < bytes.len() { bytes[i + 1] } else { b' ' };
                if !matches!(prev, b'=' | b'!' | b'<' | b'>') && next != b'=' {
                    let lvalue = line[..i].trim();
                    let rvalue = line[i + 1..].trim();
                    if lvalue.is_empty() || rvalue.is_empty() {
                        return None;
                    }
                    return Some((lvalue.to_string(), rvalue.to_string()));
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

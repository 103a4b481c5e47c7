//! Tolerant parsers for the line-oriented reply formats requested by the
//! prompt templates. Every parser returns `Err(reason)` when nothing usable is
//! found so the caller can ask once for a reformat.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanVerdict {
    Proceed,
    NeedsClarification(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanReply {
    pub plan: String,
    pub verdict: PlanVerdict,
    /// `Some(false)` when the plan says no delegation is needed.
    pub delegate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewReply {
    Accept,
    Revise(Vec<String>),
}

struct Fence<'a> {
    content: &'a str,
    start: usize,
    end: usize,
}

/// First fenced block in `text`. The content excludes the opening fence line
/// (and its language tag) and the newline before the closing fence.
fn first_fence(text: &str) -> Option<Fence<'_>> {
    let mut offset = 0;
    let mut open: Option<(usize, usize)> = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            match open {
                None => open = Some((offset, offset + line.len())),
                Some((start, body)) if trimmed == "```" => {
                    let content = text[body..offset].strip_suffix('\n').unwrap_or(&text[body..offset]);
                    let content = content.strip_suffix('\r').unwrap_or(content);
                    return Some(Fence { content, start, end: offset + line.len() });
                }
                Some(_) => {}
            }
        }
        offset += line.len();
    }
    open.map(|(start, body)| Fence { content: &text[body..], start, end: text.len() })
}

/// Code inside the first fenced block, byte-exact; the trimmed reply when
/// there is no fence.
pub fn extract_code(text: &str) -> String {
    match first_fence(text) {
        Some(fence) => fence.content.to_string(),
        None => text.trim().to_string(),
    }
}

fn control_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let trimmed = line.trim().trim_start_matches(['*', '#', ' ']);
    let (head, tail) = trimmed.split_once(':')?;
    head.trim().eq_ignore_ascii_case(key).then(|| tail.trim())
}

pub fn parse_plan(text: &str) -> Result<PlanReply, String> {
    let mut verdict = None;
    let mut delegate = None;
    let mut plan_lines = Vec::new();
    for line in text.lines() {
        if let Some(value) = control_value(line, "VERDICT") {
            let (word, rest) = match value.split_once(':') {
                Some((w, r)) => (w.trim(), r.trim()),
                None => (value, ""),
            };
            let word = word.to_ascii_uppercase().replace(['_', ' '], "");
            verdict = Some(match word.as_str() {
                "PROCEED" => PlanVerdict::Proceed,
                "CLARIFY" | "NEEDSCLARIFICATION" => {
                    if rest.is_empty() {
                        return Err("clarification verdict without a question".into());
                    }
                    PlanVerdict::NeedsClarification(rest.to_string())
                }
                other => return Err(format!("unknown verdict `{other}`")),
            });
        } else if let Some(value) = control_value(line, "DELEGATE") {
            delegate = match value.to_ascii_uppercase().as_str() {
                "NO" | "FALSE" | "NONE" => Some(false),
                "YES" | "TRUE" => Some(true),
                _ => None,
            };
        } else {
            plan_lines.push(line);
        }
    }
    let verdict = verdict.ok_or_else(|| "missing VERDICT line".to_string())?;
    Ok(PlanReply { plan: plan_lines.join("\n").trim().to_string(), verdict, delegate })
}

fn strip_list_marker(line: &str) -> Option<&str> {
    let t = line.trim();
    if let Some(rest) = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")) {
        return Some(rest.trim());
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(rest.trim());
        }
    }
    None
}

fn is_none_marker(text: &str) -> bool {
    text.trim().trim_matches('.').eq_ignore_ascii_case("none")
}

/// Subtask descriptions from a fenced block or from list-marked lines.
/// `NONE` yields an empty list.
pub fn parse_subtasks(text: &str) -> Result<Vec<String>, String> {
    if is_none_marker(text) {
        return Ok(Vec::new());
    }
    if let Some(fence) = first_fence(text) {
        if is_none_marker(fence.content) {
            return Ok(Vec::new());
        }
        let items: Vec<String> = fence
            .content
            .lines()
            .map(|l| strip_list_marker(l).unwrap_or(l.trim()))
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if !items.is_empty() {
            return Ok(items);
        }
    }
    let items: Vec<String> = text
        .lines()
        .filter_map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if items.is_empty() {
        if text.lines().any(is_none_marker) {
            return Ok(Vec::new());
        }
        return Err("no subtask list found".into());
    }
    Ok(items)
}

pub fn parse_review(text: &str) -> Result<ReviewReply, String> {
    let verdict = text
        .lines()
        .find_map(|l| control_value(l, "VERDICT"))
        .ok_or_else(|| "missing VERDICT line".to_string())?;
    match verdict.to_ascii_uppercase().as_str() {
        "ACCEPT" => Ok(ReviewReply::Accept),
        "REVISE" => {
            let body: String = text
                .lines()
                .filter(|l| control_value(l, "VERDICT").is_none())
                .collect::<Vec<_>>()
                .join("\n");
            let subtasks = parse_subtasks(&body)?;
            Ok(ReviewReply::Revise(subtasks))
        }
        other => Err(format!("unknown review verdict `{other}`")),
    }
}

/// Test code plus an optional `ENTRY:` name found outside the fence.
pub fn parse_tests(text: &str) -> Result<(String, Option<String>), String> {
    let (code, outside) = match first_fence(text) {
        Some(fence) => {
            let mut outside = String::from(&text[..fence.start]);
            outside.push_str(&text[fence.end..]);
            (fence.content.to_string(), outside)
        }
        None => (text.trim().to_string(), String::new()),
    };
    let entry = outside
        .lines()
        .find_map(|l| control_value(l, "ENTRY"))
        .filter(|e| !e.is_empty())
        .map(str::to_string);
    if code.trim().is_empty() {
        return Err("empty test code".into());
    }
    Ok((code, entry))
}

pub fn parse_consolidation(text: &str) -> Result<(String, String), String> {
    let lower = text.to_ascii_uppercase();
    let d = lower.find("DESCRIPTION:").ok_or("missing DESCRIPTION section")?;
    let t = lower.find("TRACE:").ok_or("missing TRACE section")?;
    if t < d {
        return Err("TRACE precedes DESCRIPTION".into());
    }
    let description = text[d + "DESCRIPTION:".len()..t].trim().to_string();
    let trace = text[t + "TRACE:".len()..].trim().to_string();
    if description.is_empty() {
        return Err("empty description".into());
    }
    Ok((description, trace))
}

/// The last `budget` bytes of `text`, advanced to the next char boundary.
pub fn tail_bytes(text: &str, budget: usize) -> &str {
    if text.len() <= budget {
        return text;
    }
    let mut start = text.len() - budget;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    &text[start..]
}

/// The first `lines` lines of `text`.
pub fn head_lines(text: &str, lines: usize) -> String {
    text.lines().take(lines).collect::<Vec<_>>().join("\n")
}

/// Best guess at the public entry point: the last top-level `def` or `class`.
pub fn guess_entry_point(code: &str) -> Option<String> {
    code.lines()
        .filter_map(|l| l.strip_prefix("def ").or_else(|| l.strip_prefix("class ")))
        .filter_map(|rest| {
            let name: String = rest.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
            (!name.is_empty()).then_some(name)
        })
        .next_back()
}

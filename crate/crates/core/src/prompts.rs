//! Versioned prompt templates with `{{slot}}` placeholders.

/// Bumped whenever any template text changes.
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: Template =
            Template { name: $name, text: include_str!(concat!("../templates/", $name, ".txt")) };
    };
}

template!(SYSTEM, "system");
template!(PLAN, "plan");
template!(MEMORY, "memory");
template!(MEMORY_RECORD, "memory_record");
template!(CLARIFY, "clarify");
template!(DECOMPOSE, "decompose");
template!(REVIEW, "review");
template!(REVIEW_CHILD, "review_child");
template!(IMPLEMENT, "implement");
template!(IMPLEMENT_CHILD, "implement_child");
template!(GENERATE_TESTS, "generate_tests");
template!(FIX, "fix");
template!(CONSOLIDATE, "consolidate");
template!(REFORMAT, "reformat");

impl Template {
    /// Substitutes every `{{key}}` in one pass. Substituted values are not
    /// rescanned, so they may contain braces. Unknown slots render empty.
    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    let key = &after[..end];
                    if let Some((_, value)) = slots.iter().find(|(k, _)| *k == key) {
                        out.push_str(value);
                    } else {
                        debug_assert!(false, "template `{}` has no value for slot `{key}`", self.name);
                    }
                    rest = &after[end + 2..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }

    pub fn slots(&self) -> Vec<&'static str> {
        let mut found = Vec::new();
        let mut rest = self.text;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else { break };
            if !found.contains(&&after[..end]) {
                found.push(&after[..end]);
            }
            rest = &after[end + 2..];
        }
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_single_pass() {
        let t = Template { name: "t", text: "a {{x}} b {{y}}" };
        assert_eq!(t.render(&[("x", "{{y}}"), ("y", "2")]), "a {{y}} b 2");
    }

    #[test]
    fn plan_template_pinned() {
        assert_eq!(
            PLAN.slots(),
            ["task", "parent_context", "height", "max_height", "degree_budget", "refinements"]
        );
        let rendered = PLAN.render(&[
            ("task", "add two numbers"),
            ("parent_context", "(none)"),
            ("height", "1"),
            ("max_height", "3"),
            ("degree_budget", "3"),
            ("refinements", ""),
        ]);
        assert!(rendered.starts_with("## Task\nadd two numbers\n\n## Context from parent\n(none)\n"));
        assert!(rendered.contains("Height 1 of at most 3. You may delegate at most 3 subtasks."));
        assert!(rendered.contains("VERDICT: CLARIFY: <your question>"));
    }

    #[test]
    fn every_template_has_text() {
        for t in [
            SYSTEM, PLAN, MEMORY, MEMORY_RECORD, CLARIFY, DECOMPOSE, REVIEW, REVIEW_CHILD, IMPLEMENT,
            IMPLEMENT_CHILD, GENERATE_TESTS, FIX, CONSOLIDATE, REFORMAT,
        ] {
            assert!(!t.text.trim().is_empty(), "{}", t.name);
        }
    }
}

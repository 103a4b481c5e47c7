//! Phase-scoped completion calls with round numbering and the one-shot
//! reformat retry for structured replies.

use std::collections::HashMap;

use crate::model::{NodePath, TokenUsage};
use crate::prompts;
use crate::provider::{
    CallMeta, CompletionProvider, CompletionRequest, CompletionResponse, Message, Phase, ProviderError,
};

/// Issues completion calls on behalf of one node. Implementations assign the
/// round number and do the accounting.
pub trait PhaseCaller {
    fn call(&mut self, phase: Phase, messages: Vec<Message>) -> Result<CompletionResponse, ProviderError>;
}

/// Caller for a single node outside the orchestrator: rounds count up per
/// phase from zero and usage accumulates locally.
pub struct DirectCaller<'a> {
    provider: &'a dyn CompletionProvider,
    path: NodePath,
    rounds: HashMap<Phase, u32>,
    pub usage: TokenUsage,
    pub requests: Vec<CompletionRequest>,
}

impl<'a> DirectCaller<'a> {
    pub fn new(provider: &'a dyn CompletionProvider, path: NodePath) -> Self {
        Self { provider, path, rounds: HashMap::new(), usage: TokenUsage::default(), requests: Vec::new() }
    }
}

impl PhaseCaller for DirectCaller<'_> {
    fn call(&mut self, phase: Phase, messages: Vec<Message>) -> Result<CompletionResponse, ProviderError> {
        let round = self.rounds.entry(phase).or_insert(0);
        let meta = CallMeta { path: self.path.clone(), phase, round: *round };
        *round += 1;
        let request = CompletionRequest::new(meta, messages);
        let response = self.provider.complete(&request)?;
        self.requests.push(request);
        self.usage
            .absorb(TokenUsage::completion(response.input_tokens, response.output_tokens))
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(response)
    }
}

/// Outcome of a structured call: the parsed value, or the raw text of the
/// last reply together with the parse failure.
pub enum Structured<T> {
    Parsed(T),
    Malformed { raw: String, reason: String },
}

/// Calls `phase`, parses the reply, and on a parse failure asks exactly once
/// for a reformat.
pub fn call_structured<T>(
    caller: &mut dyn PhaseCaller,
    phase: Phase,
    messages: Vec<Message>,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Structured<T>, ProviderError> {
    let first = caller.call(phase, messages.clone())?;
    let reason = match parse(&first.content) {
        Ok(value) => return Ok(Structured::Parsed(value)),
        Err(reason) => reason,
    };
    log::debug!("{phase} reply malformed ({reason}); requesting reformat");
    let mut retry = messages;
    retry.push(Message::assistant(first.content));
    retry.push(Message::user(prompts::REFORMAT.render(&[("reason", &reason)])));
    let second = caller.call(phase, retry)?;
    Ok(match parse(&second.content) {
        Ok(value) => Structured::Parsed(value),
        Err(reason) => Structured::Malformed { raw: second.content, reason },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ScriptTable, ScriptedProvider};

    #[test]
    fn reformat_is_attempted_once() {
        let mut table = ScriptTable::new();
        table.set(&NodePath::root(), Phase::Review, 0, "hmm");
        table.set(&NodePath::root(), Phase::Review, 1, "VERDICT: ACCEPT");
        let provider = ScriptedProvider::new(table);
        let mut caller = DirectCaller::new(&provider, NodePath::root());
        let out = call_structured(&mut caller, Phase::Review, vec![Message::user("x")], crate::parse::parse_review).unwrap();
        assert!(matches!(out, Structured::Parsed(crate::parse::ReviewReply::Accept)));
        assert_eq!(caller.usage.completion_calls, 2);
        let last = caller.requests.last().unwrap();
        assert_eq!(last.meta.round, 1);
        assert_eq!(last.messages.len(), 3);
    }

    #[test]
    fn second_failure_reports_malformed() {
        let mut table = ScriptTable::new();
        table.set_any_round(&NodePath::root(), Phase::Review, "hmm");
        let provider = ScriptedProvider::new(table);
        let mut caller = DirectCaller::new(&provider, NodePath::root());
        let out = call_structured(&mut caller, Phase::Review, vec![Message::user("x")], crate::parse::parse_review).unwrap();
        assert!(matches!(out, Structured::Malformed { ref raw, .. } if raw == "hmm"));
        assert_eq!(caller.usage.completion_calls, 2);
    }
}

//! Per-(request, model) token caches with a logical validity mask.
//!
//! Every row of a [`ModelState`] is prefix-valid: `mask[b][..L'_b]` is all
//! ones and `mask[b][L'_b..L]` all zeros. Appends write at `L'_b`, not at the
//! physical end, so rows that were rolled back further than others reuse
//! their masked-out slots instead of leaving interior holes. Rollback only
//! clears mask bits; [`StateManager::fix_kv_cache`] later drops the trailing
//! columns that are invalid in every row.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dist::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollbackCommand {
    pub state_id: StateId,
    /// Tokens to drop from the end of each row.
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    id: StateId,
    model_id: String,
    request_id: Option<u64>,
    physical_len: usize,
    tokens: Vec<Vec<TokenId>>,
    mask: Vec<Vec<bool>>,
    logical: Vec<usize>,
}

impl ModelState {
    pub fn id(&self) -> StateId {
        self.id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn request_id(&self) -> Option<u64> {
        self.request_id
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    /// `L`.
    pub fn physical_len(&self) -> usize {
        self.physical_len
    }

    /// `L'_b` for every row.
    pub fn logical_lens(&self) -> &[usize] {
        &self.logical
    }

    pub fn mask(&self, row: usize) -> &[bool] {
        &self.mask[row]
    }

    pub fn view(&self, row: usize) -> &[TokenId] {
        &self.tokens[row][..self.logical[row]]
    }

    fn check_prefix_valid(&self) -> bool {
        self.tokens.iter().zip(&self.mask).zip(&self.logical).all(|((t, m), &l)| {
            t.len() == self.physical_len
                && m.len() == self.physical_len
                && l <= self.physical_len
                && m[..l].iter().all(|&b| b)
                && m[l..].iter().all(|&b| !b)
        })
    }
}

/// One line of the optional state trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTraceRecord {
    pub cycle: u64,
    pub state_id: u64,
    pub op: String,
    pub logical_lens: Vec<usize>,
    pub physical_len: usize,
}

#[derive(Debug, Default)]
pub struct StateManager {
    next_id: u64,
    states: BTreeMap<StateId, ModelState>,
    released: BTreeSet<StateId>,
    trace_enabled: bool,
    cycle: u64,
    trace: Vec<StateTraceRecord>,
}

impl StateManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enable_trace(&mut self, on: bool) {
        self.trace_enabled = on;
    }

    pub fn set_cycle(&mut self, cycle: u64) {
        self.cycle = cycle;
    }

    pub fn drain_trace(&mut self) -> Vec<StateTraceRecord> {
        std::mem::take(&mut self.trace)
    }

    fn log(&mut self, id: StateId, op: &str) {
        if !self.trace_enabled {
            return;
        }
        if let Some(s) = self.states.get(&id) {
            self.trace.push(StateTraceRecord {
                cycle: self.cycle,
                state_id: id.0,
                op: op.to_string(),
                logical_lens: s.logical.clone(),
                physical_len: s.physical_len,
            });
        }
    }

    pub fn create_state(&mut self, model_id: &str, batch_size: usize) -> StateId {
        self.create(None, model_id, batch_size)
    }

    pub fn create_request_state(&mut self, request_id: u64, model_id: &str, batch_size: usize) -> StateId {
        self.create(Some(request_id), model_id, batch_size)
    }

    fn create(&mut self, request_id: Option<u64>, model_id: &str, batch_size: usize) -> StateId {
        assert!(batch_size >= 1, "batch size must be positive");
        let id = StateId(self.next_id);
        self.next_id += 1;
        self.states.insert(
            id,
            ModelState {
                id,
                model_id: model_id.to_string(),
                request_id,
                physical_len: 0,
                tokens: vec![Vec::new(); batch_size],
                mask: vec![Vec::new(); batch_size],
                logical: vec![0; batch_size],
            },
        );
        self.log(id, "create");
        id
    }

    pub fn get(&self, id: StateId) -> Result<&ModelState> {
        self.states.get(&id).ok_or(Error::UnknownState(id))
    }

    fn get_mut(&mut self, id: StateId) -> Result<&mut ModelState> {
        self.states.get_mut(&id).ok_or(Error::UnknownState(id))
    }

    /// Appends `k` tokens to every active row. Every row of `new_tokens`
    /// must have the same length; rows marked inactive are ignored.
    pub fn append(&mut self, id: StateId, new_tokens: &[Vec<TokenId>], active: &[bool]) -> Result<Vec<usize>> {
        let batch = self.get(id)?.batch_size();
        if new_tokens.len() != batch || active.len() != batch {
            return Err(Error::Shape(format!(
                "expected {batch} rows, got {} token rows and {} activity flags",
                new_tokens.len(),
                active.len()
            )));
        }
        let k = new_tokens.first().map_or(0, Vec::len);
        if new_tokens.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("rows have different token counts".into()));
        }
        let rows: Vec<&[TokenId]> = new_tokens
            .iter()
            .zip(active)
            .map(|(r, &a)| if a { r.as_slice() } else { &[][..] })
            .collect();
        self.append_rows(id, &rows, k)
    }

    /// Appends a different number of tokens to each row (empty = inactive).
    pub fn append_ragged(&mut self, id: StateId, rows: &[&[TokenId]]) -> Result<Vec<usize>> {
        let batch = self.get(id)?.batch_size();
        if rows.len() != batch {
            return Err(Error::Shape(format!("expected {batch} rows, got {}", rows.len())));
        }
        let k = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        self.append_rows(id, rows, k)
    }

    fn append_rows(&mut self, id: StateId, rows: &[&[TokenId]], k: usize) -> Result<Vec<usize>> {
        let s = self.get_mut(id)?;
        let new_len = s.physical_len + k;
        for (b, row) in rows.iter().enumerate() {
            let start = s.logical[b];
            s.tokens[b].resize(new_len, 0);
            s.mask[b].resize(new_len, false);
            s.tokens[b][start..start + row.len()].copy_from_slice(row);
            s.mask[b][start..start + row.len()].iter_mut().for_each(|m| *m = true);
            s.logical[b] = start + row.len();
        }
        s.physical_len = new_len;
        let lens = s.logical.clone();
        self.log(id, "append");
        Ok(lens)
    }

    /// Clears the last `r_b` valid mask bits of every row. Atomic: nothing
    /// changes if any row would overflow.
    pub fn logical_rollback(&mut self, cmd: &RollbackCommand) -> Result<Vec<usize>> {
        let s = self.get_mut(cmd.state_id)?;
        if cmd.lengths.len() != s.batch_size() {
            return Err(Error::Shape(format!(
                "rollback has {} rows, state has {}",
                cmd.lengths.len(),
                s.batch_size()
            )));
        }
        if let Some((row, (&r, &l))) = cmd
            .lengths
            .iter()
            .zip(&s.logical)
            .enumerate()
            .find(|(_, (&r, &l))| r > l)
        {
            return Err(Error::RollbackOverflow {
                row,
                requested: r,
                available: l,
            });
        }
        for (b, &r) in cmd.lengths.iter().enumerate() {
            let l = s.logical[b];
            s.mask[b][l - r..l].iter_mut().for_each(|m| *m = false);
            s.logical[b] = l - r;
        }
        let lens = s.logical.clone();
        self.log(cmd.state_id, "rollback");
        Ok(lens)
    }

    /// Drops the trailing columns that are invalid in every row and returns
    /// the new physical length, `max_b L'_b`.
    pub fn fix_kv_cache(&mut self, id: StateId) -> Result<usize> {
        let s = self.get_mut(id)?;
        let keep = s.logical.iter().copied().max().unwrap_or(0);
        if keep < s.physical_len {
            for row in s.tokens.iter_mut() {
                row.truncate(keep);
            }
            for row in s.mask.iter_mut() {
                row.truncate(keep);
            }
            s.physical_len = keep;
            self.log(id, "truncate");
        }
        Ok(keep)
    }

    /// The valid prefix of `row`: the only context a model may attend to.
    pub fn attention_view(&self, id: StateId, row: usize) -> Result<&[TokenId]> {
        let s = self.get(id)?;
        if row >= s.batch_size() {
            return Err(Error::Shape(format!("row {row} outside batch of {}", s.batch_size())));
        }
        Ok(s.view(row))
    }

    /// Frees a state. Releasing an already released state is a no-op.
    pub fn release_state(&mut self, id: StateId) -> Result<()> {
        if self.states.remove(&id).is_some() {
            self.released.insert(id);
            return Ok(());
        }
        if self.released.contains(&id) {
            Ok(())
        } else {
            Err(Error::UnknownState(id))
        }
    }

    /// Frees every state owned by `request_id`; returns how many were freed.
    pub fn gc_request(&mut self, request_id: u64) -> usize {
        let ids: Vec<StateId> = self
            .states
            .values()
            .filter(|s| s.request_id == Some(request_id))
            .map(|s| s.id)
            .collect();
        for id in &ids {
            self.states.remove(id);
            self.released.insert(*id);
        }
        ids.len()
    }

    pub fn live_states(&self) -> usize {
        self.states.len()
    }

    /// Checks the prefix-validity invariant of one state.
    pub fn is_prefix_valid(&self, id: StateId) -> Result<bool> {
        Ok(self.get(id)?.check_prefix_valid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled(sm: &mut StateManager, batch: usize, len: usize) -> StateId {
        let id = sm.create_state("m", batch);
        let rows: Vec<Vec<TokenId>> = (0..batch).map(|b| (0..len as u32).map(|t| t + 100 * b as u32).collect()).collect();
        sm.append(id, &rows, &vec![true; batch]).unwrap();
        id
    }

    #[test]
    fn create_and_read() {
        let mut sm = StateManager::new();
        let a = sm.create_state("m", 4);
        let b = sm.create_state("m", 1);
        assert_ne!(a, b);
        let s = sm.get(a).unwrap();
        assert_eq!(s.physical_len(), 0);
        assert_eq!(s.logical_lens(), &[0, 0, 0, 0]);
        assert_eq!(s.batch_size(), 4);
        assert!(s.mask(0).is_empty());
    }

    #[test]
    fn append_basic_and_inactive() {
        let mut sm = StateManager::new();
        let id = sm.create_state("m", 1);
        assert_eq!(sm.append(id, &[vec![1, 2, 3]], &[true]).unwrap(), vec![3]);
        let s = sm.get(id).unwrap();
        assert_eq!(s.physical_len(), 3);
        assert_eq!(s.mask(0), &[true, true, true]);

        let id = sm.create_state("m", 2);
        sm.append(id, &[vec![1, 2], vec![3, 4]], &[true, true]).unwrap();
        sm.append(id, &[vec![5], vec![6]], &[true, false]).unwrap();
        let s = sm.get(id).unwrap();
        assert_eq!(s.logical_lens(), &[3, 2]);
        assert_eq!(s.mask(1), &[true, true, false]);
        assert!(matches!(
            sm.append(id, &[vec![1], vec![2, 3]], &[true, true]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(sm.append(id, &[vec![1]], &[true]), Err(Error::Shape(_))));
    }

    #[test]
    fn rollback_examples() {
        let mut sm = StateManager::new();
        let id = filled(&mut sm, 1, 10);
        let lens = sm
            .logical_rollback(&RollbackCommand { state_id: id, lengths: vec![3] })
            .unwrap();
        assert_eq!(lens, vec![7]);
        assert_eq!(&sm.get(id).unwrap().mask(0)[7..], &[false, false, false]);
        assert_eq!(sm.get(id).unwrap().physical_len(), 10);
        assert_eq!(
            sm.logical_rollback(&RollbackCommand { state_id: id, lengths: vec![0] }).unwrap(),
            vec![7]
        );

        let id = filled(&mut sm, 3, 10);
        let lens = sm
            .logical_rollback(&RollbackCommand { state_id: id, lengths: vec![3, 1, 0] })
            .unwrap();
        assert_eq!(lens, vec![7, 9, 10]);
        let err = sm
            .logical_rollback(&RollbackCommand { state_id: id, lengths: vec![8, 0, 0] })
            .unwrap_err();
        assert_eq!(err, Error::RollbackOverflow { row: 0, requested: 8, available: 7 });
        assert_eq!(sm.get(id).unwrap().logical_lens(), &[7, 9, 10]);
    }

    #[test]
    fn truncation_reclaims_common_tail() {
        let mut sm = StateManager::new();
        let id = filled(&mut sm, 3, 10);
        sm.logical_rollback(&RollbackCommand { state_id: id, lengths: vec![3, 1, 0] }).unwrap();
        assert_eq!(sm.fix_kv_cache(id).unwrap(), 10);

        let id = filled(&mut sm, 3, 10);
        sm.logical_rollback(&RollbackCommand { state_id: id, lengths: vec![2, 2, 2] }).unwrap();
        assert_eq!(sm.fix_kv_cache(id).unwrap(), 8);
        assert_eq!(sm.get(id).unwrap().physical_len(), 8);
    }

    #[test]
    fn view_hides_masked_data() {
        let mut sm = StateManager::new();
        let id = filled(&mut sm, 1, 10);
        sm.logical_rollback(&RollbackCommand { state_id: id, lengths: vec![3] }).unwrap();
        assert_eq!(sm.attention_view(id, 0).unwrap(), &[0, 1, 2, 3, 4, 5, 6]);
        // the masked data is still physically present
        assert_eq!(sm.get(id).unwrap().physical_len(), 10);
    }

    #[test]
    fn append_after_divergent_rollback_left_compacts() {
        let mut sm = StateManager::new();
        let id = filled(&mut sm, 2, 4);
        sm.logical_rollback(&RollbackCommand { state_id: id, lengths: vec![2, 0] }).unwrap();
        sm.append(id, &[vec![9], vec![8]], &[true, true]).unwrap();
        assert_eq!(sm.attention_view(id, 0).unwrap(), &[0, 1, 9]);
        assert_eq!(sm.attention_view(id, 1).unwrap(), &[100, 101, 102, 103, 8]);
        assert!(sm.is_prefix_valid(id).unwrap());
        assert_eq!(sm.fix_kv_cache(id).unwrap(), 5);
    }

    #[test]
    fn release_and_gc() {
        let mut sm = StateManager::new();
        let id = sm.create_state("m", 1);
        sm.release_state(id).unwrap();
        assert_eq!(sm.get(id).unwrap_err(), Error::UnknownState(id));
        sm.release_state(id).unwrap();
        assert!(sm.release_state(StateId(999)).is_err());

        let a = sm.create_request_state(7, "x", 1);
        let b = sm.create_request_state(7, "y", 2);
        let c = sm.create_request_state(8, "x", 1);
        assert_eq!(sm.gc_request(7), 2);
        assert!(sm.get(a).is_err() && sm.get(b).is_err());
        assert!(sm.get(c).is_ok());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Append(Vec<Vec<TokenId>>),
        Rollback(Vec<usize>),
        Fix,
    }

    fn ops(batch: usize) -> impl Strategy<Value = Vec<Op>> {
        let op = prop_oneof![
            3 => prop::collection::vec(prop::collection::vec(0u32..50, 0..6), batch).prop_map(Op::Append),
            2 => prop::collection::vec(0usize..8, batch).prop_map(Op::Rollback),
            1 => Just(Op::Fix),
        ];
        prop::collection::vec(op, 1..40)
    }

    proptest! {
        #[test]
        fn matches_shadow_lists((batch, ops) in (1usize..=8).prop_flat_map(|b| (Just(b), ops(b)))) {
            let mut sm = StateManager::new();
            let id = sm.create_state("m", batch);
            let mut shadow: Vec<Vec<TokenId>> = vec![Vec::new(); batch];
            let mut appended_total = 0;
            for op in ops {
                match op {
                    Op::Append(rows) => {
                        let refs: Vec<&[TokenId]> = rows.iter().map(|r| r.as_slice()).collect();
                        sm.append_ragged(id, &refs).unwrap();
                        appended_total += rows.iter().map(Vec::len).max().unwrap_or(0);
                        for (s, r) in shadow.iter_mut().zip(&rows) {
                            s.extend_from_slice(r);
                        }
                    }
                    Op::Rollback(r) => {
                        let r: Vec<usize> = r.iter().zip(&shadow).map(|(&r, s)| r.min(s.len())).collect();
                        let views: Vec<Vec<TokenId>> = (0..batch).map(|b| sm.attention_view(id, b).unwrap().to_vec()).collect();
                        sm.logical_rollback(&RollbackCommand { state_id: id, lengths: r.clone() }).unwrap();
                        for (b, s) in shadow.iter_mut().enumerate() {
                            s.truncate(s.len() - r[b]);
                            prop_assert_eq!(&views[b][..s.len()], s.as_slice());
                        }
                    }
                    Op::Fix => {
                        let before: Vec<Vec<TokenId>> = (0..batch).map(|b| sm.attention_view(id, b).unwrap().to_vec()).collect();
                        let l = sm.fix_kv_cache(id).unwrap();
                        prop_assert_eq!(l, shadow.iter().map(Vec::len).max().unwrap());
                        for (b, v) in before.iter().enumerate() {
                            prop_assert_eq!(sm.attention_view(id, b).unwrap(), v.as_slice());
                        }
                    }
                }
                prop_assert!(sm.is_prefix_valid(id).unwrap());
                prop_assert!(sm.get(id).unwrap().physical_len() <= appended_total);
                for (b, s) in shadow.iter().enumerate() {
                    prop_assert_eq!(sm.attention_view(id, b).unwrap(), s.as_slice());
                }
            }
        }
    }
}

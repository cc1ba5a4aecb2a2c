use indexmap::IndexMap;

use crate::store::Changeset;
use crate::value::{Row, RowId};

#[derive(Debug)]
enum Op {
    Insert(Row),
    Update(Row),
    Remove,
}

/// Merges consecutive forward changesets into one with the same net effect.
///
/// Inserts keep their order; a later update of an id supersedes an earlier
/// one; insert then update collapses to one insert with the final values;
/// insert then remove cancels out; update then remove becomes a remove; remove
/// then insert becomes an update. The result takes the step and timestamp of
/// the newest input.
pub fn coalesce(pending: Vec<Changeset>) -> Changeset {
    let mut iter = pending.into_iter();
    let Some(first) = iter.next() else {
        return Changeset::forward(-1);
    };
    let rest: Vec<Changeset> = iter.collect();
    if rest.is_empty() {
        return first;
    }
    let mut ops: IndexMap<RowId, Op> = IndexMap::new();
    let (mut step, mut emitted_at) = (first.step, first.emitted_at);
    for cs in std::iter::once(first).chain(rest) {
        step = cs.step;
        emitted_at = cs.emitted_at;
        for row in cs.inserts {
            match ops.get_mut(&row.id) {
                Some(op @ Op::Remove) => *op = Op::Update(row),
                _ => {
                    ops.insert(row.id, Op::Insert(row));
                }
            }
        }
        for row in cs.updates {
            match ops.get_mut(&row.id) {
                Some(Op::Insert(r)) | Some(Op::Update(r)) => *r = row,
                _ => {
                    ops.insert(row.id, Op::Update(row));
                }
            }
        }
        for id in cs.removes {
            match ops.get(&id) {
                Some(Op::Insert(_)) => {
                    ops.shift_remove(&id);
                }
                _ => {
                    ops.insert(id, Op::Remove);
                }
            }
        }
    }
    let mut merged = Changeset::forward(step);
    merged.emitted_at = emitted_at;
    for (id, op) in ops {
        match op {
            Op::Insert(r) => merged.inserts.push(r),
            Op::Update(r) => merged.updates.push(r),
            Op::Remove => merged.removes.push(id),
        }
    }
    merged
}

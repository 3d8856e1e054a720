/** Pure view logic: snippet highlighting, ordering, decision validation.
 *
 * Highlight offsets are derived client-side by first-occurrence search with
 * whitespace-normalized matching, mirroring the engine's issue-anchoring
 * rule, so the dashboard and the pipeline agree on what counts as "found in
 * the content".
 */

import type { ReviewItem, WireRule } from './types.js';

export interface SnippetRange {
  start: number;
  end: number; // exclusive, in original-content coordinates
}

export function normalizeWs(text: string): string {
  return text.split(/\s+/).filter(Boolean).join(' ');
}

/** First occurrence of `snippet` in `content` under whitespace-normalized
 * matching, mapped back to original character offsets. Null when absent. */
export function findSnippetRange(content: string, snippet: string): SnippetRange | null {
  const needle = normalizeWs(snippet);
  if (!needle) return null;
  const normChars: string[] = [];
  const originalIndex: number[] = []; // -1 marks an inserted separator space
  let pendingSpace = false;
  for (let i = 0; i < content.length; i++) {
    const ch = content[i] as string;
    if (/\s/.test(ch)) {
      pendingSpace = normChars.length > 0;
      continue;
    }
    if (pendingSpace) {
      normChars.push(' ');
      originalIndex.push(-1);
      pendingSpace = false;
    }
    normChars.push(ch);
    originalIndex.push(i);
  }
  const haystack = normChars.join('');
  const at = haystack.indexOf(needle);
  if (at < 0) return null;
  let first = at;
  while (first < originalIndex.length && originalIndex[first] === -1) first += 1;
  let last = at + needle.length - 1;
  while (last >= 0 && originalIndex[last] === -1) last -= 1;
  if (first > last) return null;
  return { start: originalIndex[first] as number, end: (originalIndex[last] as number) + 1 };
}

export interface Segment {
  text: string;
  highlighted: boolean;
}

export function renderSegments(content: string, range: SnippetRange | null): Segment[] {
  if (!range) return [{ text: content, highlighted: false }];
  const segments: Segment[] = [];
  if (range.start > 0) segments.push({ text: content.slice(0, range.start), highlighted: false });
  segments.push({ text: content.slice(range.start, range.end), highlighted: true });
  if (range.end < content.length) {
    segments.push({ text: content.slice(range.end), highlighted: false });
  }
  return segments;
}

export interface ReviewViewModel {
  itemId: string;
  contentId: string;
  createdAt: string;
  status: string;
  ruleId: string;
  ruleText: string | null;
  snippet: string;
  recommendation: string;
  origin: string;
  content: string | null;
  segments: Segment[] | null;
  unanchored: boolean;
  outOfScope: boolean;
  teacher: { isValid: boolean; justification: string } | null;
  student: { ruleId: string; snippet: string } | null;
}

export function buildViewModel(
  item: ReviewItem,
  rulesById: Map<string, WireRule>,
): ReviewViewModel {
  const content = item.content ?? null;
  const range = content ? findSnippetRange(content, item.issue.context) : null;
  const unanchored = Boolean(item.issue.unanchored) || (content !== null && range === null);
  return {
    itemId: item.item_id,
    contentId: item.content_id,
    createdAt: item.created_at,
    status: item.status,
    ruleId: item.issue.rule_id,
    ruleText: rulesById.get(item.issue.rule_id)?.text ?? null,
    snippet: item.issue.context,
    recommendation: item.issue.recommendation,
    origin: item.issue.origin,
    content,
    segments: content ? renderSegments(content, range) : null,
    unanchored,
    outOfScope: Boolean(item.issue.out_of_scope),
    teacher: item.teacher_position
      ? {
          isValid: item.teacher_position.is_valid,
          justification: item.teacher_position.justification,
        }
      : null,
    student: item.student_position
      ? { ruleId: item.student_position.rule_id, snippet: item.student_position.context }
      : null,
  };
}

/** Pending items oldest-first (ISO timestamps sort lexicographically). */
export function sortPending(items: ReviewItem[]): ReviewItem[] {
  return [...items].sort((a, b) =>
    a.created_at < b.created_at ? -1 : a.created_at > b.created_at ? 1 : 0,
  );
}

export function indexRules(rules: WireRule[]): Map<string, WireRule> {
  return new Map(rules.map((rule) => [rule.rule_id, rule]));
}

/** Client-side validation: decisions must carry a non-empty justification. */
export function validateJustification(justification: string): string | null {
  if (!justification || !justification.trim()) {
    return 'A justification is required before submitting a decision.';
  }
  return null;
}

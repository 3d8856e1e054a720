/** Decision submission flow shared by the DOM layer and the tests.
 *
 * Validation happens before any network activity: an empty justification
 * never produces a request. There is no optimistic update; callers refresh
 * from the server response.
 */

import type { ApiClient, DecideResult } from './api.js';
import type { DecisionPayload, KnowledgeUpdatePayload, ReviewItem } from './types.js';
import { validateJustification } from './viewmodel.js';

export type SubmitResult =
  | { kind: 'invalid'; message: string }
  | DecideResult;

export async function submitDecision(
  api: ApiClient,
  itemId: string,
  verdict: 'accept_violation' | 'reject_flag',
  justification: string,
  reviewerId: string,
  knowledgeUpdate?: KnowledgeUpdatePayload,
): Promise<SubmitResult> {
  const problem = validateJustification(justification);
  if (problem) {
    return { kind: 'invalid', message: problem };
  }
  const payload: DecisionPayload = {
    verdict,
    justification,
    reviewer_id: reviewerId,
    ...(knowledgeUpdate ? { knowledge_update: knowledgeUpdate } : {}),
  };
  return api.decide(itemId, payload);
}

/** Human-readable confirmation of an applied knowledge update, including the
 * affected context scope for suppressions. */
export function describeOutcome(item: ReviewItem): string {
  const decision = item.decision;
  if (!decision) return `Item ${item.item_id} is ${item.status}.`;
  let text = `Item ${item.item_id} ${item.status} by ${decision.reviewer_id}.`;
  const update = decision.knowledge_update;
  if (update) {
    if (update.action === 'suppress_in_context') {
      const scope = update.scope ?? {};
      const parts = Object.entries(scope)
        .filter(([, value]) => value !== undefined && value !== null && String(value).length)
        .map(([key, value]) => `${key}=${Array.isArray(value) ? value.join(',') : value}`);
      text += ` Rule ${update.rule_id} suppressed for ${parts.length ? parts.join(', ') : 'all contexts'}.`;
    } else if (update.action === 'mark_always_valid') {
      text += ` Rule ${update.rule_id} marked always valid.`;
    } else {
      text += ` Rule ${update.rule_id} recommendation amended.`;
    }
  }
  return text;
}

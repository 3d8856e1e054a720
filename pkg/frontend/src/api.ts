/** Typed client for the review/rules HTTP API.
 *
 * The dashboard is a pure API client: no direct file or rule-base access,
 * and view state is only ever updated from server responses.
 */

import type {
  ApiErrorBody,
  DecisionPayload,
  FilteredRuleSet,
  ReviewItem,
} from './types.js';

export type DecideResult =
  | { kind: 'decided'; item: ReviewItem }
  | { kind: 'already_decided'; message: string }
  | { kind: 'rejected_by_server'; status: number; error: ApiErrorBody };

export class ApiClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async listPending(): Promise<ReviewItem[]> {
    const response = await this.fetchFn(this.url('/review/pending'));
    if (!response.ok) {
      throw new Error(`listing pending items failed: HTTP ${response.status}`);
    }
    return (await response.json()) as ReviewItem[];
  }

  async getRules(): Promise<FilteredRuleSet> {
    const response = await this.fetchFn(this.url('/rules'));
    if (!response.ok) {
      throw new Error(`rule lookup failed: HTTP ${response.status}`);
    }
    return (await response.json()) as FilteredRuleSet;
  }

  async decide(itemId: string, payload: DecisionPayload): Promise<DecideResult> {
    const response = await this.fetchFn(this.url(`/review/${itemId}/decision`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(payload),
    });
    if (response.ok) {
      return { kind: 'decided', item: (await response.json()) as ReviewItem };
    }
    const error = (await response.json()) as ApiErrorBody;
    if (response.status === 409) {
      return { kind: 'already_decided', message: error.message };
    }
    return { kind: 'rejected_by_server', status: response.status, error };
  }
}

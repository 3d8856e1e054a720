/** Wire types mirroring the review/rules HTTP API. */

export interface WireIssue {
  rule_id: string;
  context: string;
  recommendation: string;
  origin: 'teacher' | 'student';
  pass_index: number;
  uid: string;
  unanchored?: boolean;
  out_of_scope?: boolean;
}

export interface WireVerdict {
  issue: WireIssue;
  is_valid: boolean;
  justification: string;
}

export interface WireDecision {
  verdict: 'accept_violation' | 'reject_flag';
  justification: string;
  reviewer_id: string;
  knowledge_update?: KnowledgeUpdatePayload;
}

export interface ReviewItem {
  item_id: string;
  content_id: string;
  issue: WireIssue;
  content?: string;
  teacher_position?: WireVerdict;
  student_position?: WireIssue;
  status: 'pending' | 'accepted' | 'rejected';
  decision?: WireDecision;
  created_at: string;
  decided_at?: string;
}

export interface WireRule {
  rule_id: string;
  text: string;
  polarity: 'do' | 'prohibit';
  lrbtc_module: string;
  status?: string;
}

export interface FilteredRuleSet {
  rulebase_version: number;
  rules: WireRule[];
  trace: unknown[];
}

export interface ContextPayload {
  ip?: string;
  country?: string;
  use_case?: string;
  topic?: string;
  subtasks?: string[];
}

export interface KnowledgeUpdatePayload {
  rule_id: string;
  action: 'suppress_in_context' | 'mark_always_valid' | 'amend_recommendation';
  scope?: ContextPayload;
  recommendation?: string;
  scope_note?: string;
}

export interface DecisionPayload {
  verdict: 'accept_violation' | 'reject_flag';
  justification: string;
  reviewer_id: string;
  knowledge_update?: KnowledgeUpdatePayload;
}

export interface ApiErrorBody {
  code: string;
  message: string;
  detail?: unknown;
}

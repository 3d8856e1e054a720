/** DOM layer: queue list, conflict detail with highlighted content, and the
 * decision form. All state transitions come from server responses. */

import { ApiClient } from './api.js';
import { describeOutcome, submitDecision } from './flow.js';
import type { KnowledgeUpdatePayload, ReviewItem, WireRule } from './types.js';
import {
  ReviewViewModel,
  buildViewModel,
  indexRules,
  sortPending,
} from './viewmodel.js';

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class Dashboard {
  private items: ReviewItem[] = [];
  private rules: Map<string, WireRule> = new Map();
  private selected: string | null = null;
  private notice = '';

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
  ) {}

  async start(refreshMs: number): Promise<void> {
    await this.refresh();
    if (refreshMs > 0) {
      setInterval(() => void this.refresh(), refreshMs);
    }
  }

  async refresh(): Promise<void> {
    try {
      const [items, ruleSet] = await Promise.all([
        this.api.listPending(),
        this.api.getRules(),
      ]);
      this.items = sortPending(items);
      this.rules = indexRules(ruleSet.rules);
      if (this.selected && !this.items.some((i) => i.item_id === this.selected)) {
        this.selected = null;
      }
    } catch (error) {
      this.notice = `Cannot reach the service: ${String(error)}`;
    }
    this.render();
  }

  private render(): void {
    this.root.replaceChildren();
    const layout = el('div', 'layout');
    layout.append(this.renderQueue(), this.renderDetail());
    if (this.notice) {
      const banner = el('div', 'notice', this.notice);
      this.root.append(banner);
    }
    this.root.append(layout);
  }

  private renderQueue(): HTMLElement {
    const panel = el('section', 'queue');
    panel.append(el('h2', undefined, `Pending review (${this.items.length})`));
    if (!this.items.length) {
      const empty = el('div', 'empty-state');
      empty.append(
        el('p', undefined, 'The review queue is empty.'),
        el('p', 'muted', 'Conflicts from QC runs will appear here.'),
      );
      panel.append(empty);
      return panel;
    }
    const list = el('ul', 'queue-list');
    for (const item of this.items) {
      const row = el('li', item.item_id === this.selected ? 'row selected' : 'row');
      row.dataset.itemId = item.item_id;
      const headline = el('div', 'row-head');
      headline.append(
        el('span', 'rule-id', item.issue.rule_id),
        el('span', `badge origin-${item.issue.origin}`, item.issue.origin),
      );
      if (item.issue.unanchored) {
        headline.append(el('span', 'badge unanchored', 'snippet not found'));
      }
      row.append(headline);
      row.append(el('div', 'snippet', item.issue.context || '(empty snippet)'));
      row.append(el('div', 'muted', `${item.content_id} · ${item.created_at}`));
      row.addEventListener('click', () => {
        this.selected = item.item_id;
        this.render();
      });
      list.append(row);
    }
    panel.append(list);
    return panel;
  }

  private renderDetail(): HTMLElement {
    const panel = el('section', 'detail');
    const item = this.items.find((i) => i.item_id === this.selected);
    if (!item) {
      panel.append(el('p', 'muted', 'Select a conflict to review it.'));
      return panel;
    }
    const vm = buildViewModel(item, this.rules);
    panel.append(el('h2', undefined, `Conflict ${vm.itemId}`));

    const badges = el('div', 'badges');
    badges.append(el('span', `badge origin-${vm.origin}`, `flagged by ${vm.origin}`));
    if (vm.unanchored) {
      badges.append(el('span', 'badge unanchored', 'snippet not found in content'));
    }
    if (vm.outOfScope) {
      badges.append(el('span', 'badge out-of-scope', 'rule outside filtered set'));
    }
    panel.append(badges);

    const rule = el('div', 'rule-box');
    rule.append(el('div', 'rule-id', vm.ruleId));
    rule.append(el('div', undefined, vm.ruleText ?? '(rule text unavailable)'));
    panel.append(rule);

    panel.append(el('h3', undefined, 'Content'));
    if (vm.segments) {
      const contentBox = el('div', 'content-box');
      for (const segment of vm.segments) {
        const span = el('span', segment.highlighted ? 'highlight' : undefined, segment.text);
        contentBox.append(span);
      }
      panel.append(contentBox);
    } else {
      panel.append(el('p', 'muted', '(content not captured for this item)'));
      panel.append(el('div', 'content-box', vm.snippet));
    }

    panel.append(el('h3', undefined, 'Positions'));
    const positions = el('div', 'positions');
    if (vm.teacher) {
      positions.append(el(
        'div',
        'position teacher',
        `teacher: ${vm.teacher.isValid ? 'valid' : 'invalid'} — ${vm.teacher.justification}`,
      ));
    }
    if (vm.student) {
      positions.append(el(
        'div',
        'position student',
        `student: ${vm.student.ruleId} — "${vm.student.snippet}"`,
      ));
    }
    if (!vm.teacher && !vm.student) {
      positions.append(el('div', 'muted', 'No model verdict; surfaced directly for review.'));
    }
    positions.append(el('div', 'recommendation', `recommendation: ${vm.recommendation}`));
    panel.append(positions);

    panel.append(this.renderForm(item));
    return panel;
  }

  private renderForm(item: ReviewItem): HTMLElement {
    const form = el('form', 'decision-form');
    form.append(el('h3', undefined, 'Decision'));

    const verdicts = el('div', 'verdicts');
    for (const [value, label] of [
      ['accept_violation', 'Accept violation'],
      ['reject_flag', 'Reject flag'],
    ] as const) {
      const wrap = el('label');
      const radio = el('input') as HTMLInputElement;
      radio.type = 'radio';
      radio.name = 'verdict';
      radio.value = value;
      if (value === 'accept_violation') radio.checked = true;
      wrap.append(radio, document.createTextNode(` ${label}`));
      verdicts.append(wrap);
    }
    form.append(verdicts);

    const justification = el('textarea') as HTMLTextAreaElement;
    justification.name = 'justification';
    justification.placeholder = 'Justification (required)';
    form.append(justification);

    const reviewer = el('input') as HTMLInputElement;
    reviewer.name = 'reviewer';
    reviewer.placeholder = 'Reviewer id';
    reviewer.value = localStorage.getItem('reviewer_id') ?? '';
    form.append(reviewer);

    const updateSelect = el('select') as HTMLSelectElement;
    for (const [value, label] of [
      ['', 'No knowledge update'],
      ['suppress_in_context', 'Suppress rule in a context'],
      ['mark_always_valid', 'Mark rule always valid'],
      ['amend_recommendation', 'Amend recommendation'],
    ] as const) {
      const option = el('option', undefined, label) as HTMLOptionElement;
      option.value = value;
      updateSelect.append(option);
    }
    form.append(updateSelect);

    const scopeInput = el('input') as HTMLInputElement;
    scopeInput.placeholder = 'Scope, e.g. country=US (for suppression)';
    scopeInput.hidden = true;
    form.append(scopeInput);

    const amendInput = el('input') as HTMLInputElement;
    amendInput.placeholder = 'Amended recommendation text';
    amendInput.hidden = true;
    form.append(amendInput);

    updateSelect.addEventListener('change', () => {
      scopeInput.hidden = updateSelect.value !== 'suppress_in_context';
      amendInput.hidden = updateSelect.value !== 'amend_recommendation';
    });

    const errorLine = el('div', 'error');
    errorLine.hidden = true;
    form.append(errorLine);

    const submit = el('button', undefined, 'Submit decision') as HTMLButtonElement;
    submit.type = 'submit';
    form.append(submit);

    form.addEventListener('submit', (event) => {
      event.preventDefault();
      void (async () => {
        const verdict = (form.querySelector('input[name=verdict]:checked') as HTMLInputElement)
          .value as 'accept_violation' | 'reject_flag';
        localStorage.setItem('reviewer_id', reviewer.value);
        const update = this.collectUpdate(item, updateSelect.value, scopeInput.value,
                                          amendInput.value);
        const result = await submitDecision(
          this.api, item.item_id, verdict, justification.value,
          reviewer.value || 'ui', update);
        if (result.kind === 'invalid') {
          errorLine.textContent = result.message;
          errorLine.hidden = false;
          return; // no request was sent; state untouched
        }
        if (result.kind === 'already_decided') {
          this.notice = `Already decided by another reviewer: ${result.message}`;
        } else if (result.kind === 'rejected_by_server') {
          this.notice = `Server rejected the decision: ${result.error.message}`;
        } else {
          this.notice = describeOutcome(result.item);
          this.selected = null;
        }
        await this.refresh();
      })();
    });
    return form;
  }

  private collectUpdate(
    item: ReviewItem,
    action: string,
    scopeRaw: string,
    amended: string,
  ): KnowledgeUpdatePayload | undefined {
    if (!action) return undefined;
    if (action === 'suppress_in_context') {
      const scope: Record<string, string> = {};
      for (const part of scopeRaw.split(',')) {
        const [key, value] = part.split('=').map((s) => s.trim());
        if (key && value) scope[key] = value;
      }
      return { rule_id: item.issue.rule_id, action, scope };
    }
    if (action === 'amend_recommendation') {
      return { rule_id: item.issue.rule_id, action, recommendation: amended };
    }
    return { rule_id: item.issue.rule_id, action: 'mark_always_valid' };
  }
}

/**
 * Worker console: join the retainer pool, render one task at a time (token
 * strip with a single highlighted token, label buttons in server order, a
 * deadline countdown), send exactly one answer per task, then idle.
 */

import { frame, TaskFrame } from './schema.js';
import { ReconnectingSocket, SocketFactory } from './ws.js';

export interface WorkerConsoleOptions {
  root: HTMLElement;
  url: string;
  socketFactory?: SocketFactory;
  now?: () => number;
}

export class WorkerConsole {
  readonly root: HTMLElement;
  private readonly socket: ReconnectingSocket;
  private readonly now: () => number;
  private workerId: string | null = null;
  private task: TaskFrame | null = null;
  private answeredQueryIds = new Set<number>();
  private countdownTimer: ReturnType<typeof setInterval> | null = null;
  private taskShownAt = 0;

  constructor(options: WorkerConsoleOptions) {
    this.root = options.root;
    this.now = options.now ?? (() => Date.now());
    this.renderShell();
    this.socket = new ReconnectingSocket({
      url: options.url,
      factory: options.socketFactory,
      onStateChange: (connected) => this.setBanner(!connected),
      onConnect: () => this.join(),
      onMessage: (message) => this.handle(message),
    });
  }

  private join(): void {
    const body: Record<string, unknown> = frame({ type: 'join' });
    if (this.workerId) body['worker_id'] = this.workerId;
    this.socket.send(body);
  }

  private handle(message: Record<string, unknown>): void {
    switch (message['type']) {
      case 'joined':
        this.workerId = String(message['worker_id']);
        if (!this.task) this.showIdle();
        break;
      case 'task':
        this.task = message as unknown as TaskFrame;
        this.taskShownAt = this.now();
        this.renderTask(this.task);
        break;
      case 'idle':
      case 'stale':
        this.task = null;
        this.showIdle();
        break;
      case 'error':
        this.showFatal(String(message['reason']));
        break;
      default:
        break; // unknown frame types are ignored
    }
  }

  /** Exactly one answer per task; double clicks hit the guard. */
  answer(label: string): void {
    const task = this.task;
    if (!task || this.answeredQueryIds.has(task.query_id)) return;
    this.answeredQueryIds.add(task.query_id);
    this.socket.send(frame({ type: 'answer', query_id: task.query_id, label }));
    this.root.querySelectorAll<HTMLButtonElement>('.label-button').forEach((b) => {
      b.disabled = true;
    });
  }

  private renderShell(): void {
    this.root.innerHTML = `
      <div class="banner" id="connection-banner" hidden>connection lost — retrying…</div>
      <div id="stage"></div>`;
  }

  private setBanner(visible: boolean): void {
    const banner = this.root.querySelector<HTMLElement>('#connection-banner');
    if (banner) banner.hidden = !visible;
  }

  private stage(): HTMLElement {
    return this.root.querySelector<HTMLElement>('#stage')!;
  }

  private showIdle(): void {
    this.stopCountdown();
    this.stage().innerHTML = `
      <section class="idle">
        <h2>Standing by</h2>
        <p>You are in the pool${this.workerId ? ` as <code>${this.workerId}</code>` : ''}.
        The next task appears here automatically.</p>
      </section>`;
  }

  private showFatal(reason: string): void {
    this.stopCountdown();
    this.stage().innerHTML = `<section class="fatal"><h2>Cannot join</h2><p>${reason}</p></section>`;
  }

  private renderTask(task: TaskFrame): void {
    this.stopCountdown();
    const strip = task.tokens
      .map((tok, i) =>
        i === task.highlight_index
          ? `<span class="token highlight">${escapeHtml(tok)}</span>`
          : `<span class="token">${escapeHtml(tok)}</span>`)
      .join(' ');
    const buttons = task.labels
      .map((label) =>
        `<button class="label-button" data-label="${escapeHtml(label)}">${escapeHtml(label)}</button>`)
      .join('');
    this.stage().innerHTML = `
      <section class="task">
        <p class="prompt">What is the highlighted token?</p>
        <p class="strip">${strip}</p>
        <div class="labels">${buttons}</div>
        <p class="countdown">time left: <span id="countdown-value"></span>s</p>
      </section>`;
    this.stage().querySelectorAll<HTMLButtonElement>('.label-button').forEach((button) => {
      button.addEventListener('click', () => this.answer(button.dataset['label']!));
    });
    this.updateCountdown(task);
    this.countdownTimer = setInterval(() => this.updateCountdown(task), 500);
  }

  private updateCountdown(task: TaskFrame): void {
    const target = this.root.querySelector<HTMLElement>('#countdown-value');
    if (!target) return;
    const elapsed = (this.now() - this.taskShownAt) / 1000;
    target.textContent = Math.max(0, task.deadline_seconds - elapsed).toFixed(0);
  }

  private stopCountdown(): void {
    if (this.countdownTimer !== null) {
      clearInterval(this.countdownTimer);
      this.countdownTimer = null;
    }
  }
}

function escapeHtml(value: string): string {
  return value
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

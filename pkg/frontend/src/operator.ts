/**
 * Operator dashboard: live marginal bars for the current example, pool and
 * queue gauges, cumulative cost, rolling quality metrics, and a
 * queries-per-token sparkline. Every displayed number comes verbatim from a
 * server frame; the client only formats.
 */

import { DashboardFrame, frame } from './schema.js';
import { ReconnectingSocket, SocketFactory } from './ws.js';

export const STALE_AFTER_MS = 5000;

export interface OperatorDashboardOptions {
  root: HTMLElement;
  wsUrl: string;
  apiBase: string;       // e.g. "http://host:8400" with ?token handled here
  token: string;
  socketFactory?: SocketFactory;
  fetchFn?: typeof fetch;
  now?: () => number;
}

export class OperatorDashboard {
  readonly root: HTMLElement;
  private readonly socket: ReconnectingSocket;
  private readonly fetchFn: typeof fetch;
  private readonly apiBase: string;
  private readonly token: string;
  private readonly now: () => number;
  private lastPushAt: number;
  private staleTimer: ReturnType<typeof setInterval>;

  constructor(options: OperatorDashboardOptions) {
    this.root = options.root;
    this.fetchFn = options.fetchFn ?? fetch.bind(globalThis);
    this.apiBase = options.apiBase;
    this.token = options.token;
    this.now = options.now ?? (() => Date.now());
    this.lastPushAt = this.now();
    this.renderShell();
    this.socket = new ReconnectingSocket({
      url: options.wsUrl,
      factory: options.socketFactory,
      onMessage: (message) => this.handle(message),
    });
    this.staleTimer = setInterval(() => this.refreshStale(), 1000);
  }

  private handle(message: Record<string, unknown>): void {
    if (message['type'] !== 'dashboard') return;
    this.lastPushAt = this.now();
    this.refreshStale();
    this.render(message as unknown as DashboardFrame);
  }

  async start(): Promise<void> {
    await this.fetchFn(`${this.apiBase}/stream/start?token=${this.token}`, { method: 'POST' });
  }

  async stop(): Promise<void> {
    await this.fetchFn(`${this.apiBase}/stream/stop?token=${this.token}`, { method: 'POST' });
  }

  private refreshStale(): void {
    const stale = this.now() - this.lastPushAt > STALE_AFTER_MS;
    const banner = this.root.querySelector<HTMLElement>('#stale-banner');
    if (banner) banner.hidden = !stale;
  }

  private renderShell(): void {
    this.root.innerHTML = `
      <div class="banner" id="stale-banner" hidden>no server pushes for over 5 s — state may be stale</div>
      <header class="controls">
        <button id="start-button">start stream</button>
        <button id="stop-button">stop stream</button>
        <span id="run-state"></span>
      </header>
      <section class="gauges">
        <span>pool <b id="pool-size">–</b></span>
        <span>queue <b id="queue-depth">–</b></span>
        <span>episodes <b id="completed-episodes">–</b></span>
        <span>cost <b id="cumulative-cost">–</b></span>
        <span>accuracy <b id="rolling-accuracy">–</b></span>
        <span>F1 <b id="rolling-f1">–</b></span>
      </section>
      <section id="sparkline-box">
        <h3>queries per token</h3>
        <svg id="sparkline" viewBox="0 0 100 24" preserveAspectRatio="none"></svg>
      </section>
      <section id="marginals-box">
        <h3 id="episode-title">no episode yet</h3>
        <div id="marginals"></div>
      </section>`;
    this.root.querySelector('#start-button')!
      .addEventListener('click', () => void this.start());
    this.root.querySelector('#stop-button')!
      .addEventListener('click', () => void this.stop());
  }

  private set(id: string, text: string): void {
    const el = this.root.querySelector<HTMLElement>(`#${id}`);
    if (el) el.textContent = text;
  }

  private render(dash: DashboardFrame): void {
    this.set('run-state', dash.running ? 'running' : 'idle');
    this.set('pool-size', String(dash.pool_size));
    this.set('queue-depth', String(dash.queue_depth));
    this.set('completed-episodes', String(dash.completed_episodes));
    // the server tally verbatim: no client-side arithmetic
    this.set('cumulative-cost', String(dash.cumulative_cost));
    if (dash.rolling) {
      this.set('rolling-accuracy', dash.rolling.micro_accuracy.toFixed(3));
      this.set('rolling-f1', dash.rolling.f1_average.toFixed(3));
      this.renderSparkline(dash.rolling.curve.map((row) => row.qs_per_token));
    }
    this.renderMarginals(dash);
  }

  private renderSparkline(values: number[]): void {
    const svg = this.root.querySelector<SVGElement>('#sparkline');
    if (!svg || values.length === 0) return;
    const max = Math.max(...values, 1e-9);
    const step = values.length > 1 ? 100 / (values.length - 1) : 0;
    const points = values
      .map((v, i) => `${(i * step).toFixed(2)},${(22 - (v / max) * 20).toFixed(2)}`)
      .join(' ');
    svg.innerHTML = `<polyline fill="none" stroke="currentColor" points="${points}"></polyline>`;
  }

  private renderMarginals(dash: DashboardFrame): void {
    const box = this.root.querySelector<HTMLElement>('#marginals')!;
    if (!dash.marginals || !dash.tokens) {
      this.set('episode-title', dash.episode ? `episode ${dash.episode.id}` : 'no episode running');
      box.innerHTML = '';
      return;
    }
    this.set('episode-title',
      dash.episode ? `episode ${dash.episode.id} (${dash.episode.index + 1}/${dash.episode.total})` : '');
    box.innerHTML = dash.tokens
      .map((token, i) => {
        const bars = dash.marginals![i]
          .map((p, k) => {
            const height = Math.round(p * 100);
            return `<div class="bar" data-label="${dash.labels[k]}" data-p="${p}"
              style="height:${height}%" title="${dash.labels[k]} ${p.toFixed(3)}"></div>`;
          })
          .join('');
        return `<figure class="token-marginal">
            <div class="bars">${bars}</div>
            <figcaption>${token}</figcaption>
          </figure>`;
      })
      .join('');
  }

  dispose(): void {
    clearInterval(this.staleTimer);
    this.socket.close();
  }

  ping(): void {
    this.socket.send(frame({ type: 'ping' }));
  }
}

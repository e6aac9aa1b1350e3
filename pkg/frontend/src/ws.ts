/**
 * Reconnecting JSON socket: exponential backoff on loss, message dispatch in
 * receipt order, and connection-state callbacks for the banner.
 */

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ReconnectingSocketOptions {
  url: string;
  onMessage: (message: Record<string, unknown>) => void;
  onStateChange?: (connected: boolean) => void;
  onConnect?: () => void;
  factory?: SocketFactory;
  baseDelayMs?: number;
  maxDelayMs?: number;
}

const defaultFactory: SocketFactory = (url) =>
  new WebSocket(url) as unknown as SocketLike;

export class ReconnectingSocket {
  private socket: SocketLike | null = null;
  private closed = false;
  private attempt = 0;
  private readonly opts: Required<Pick<ReconnectingSocketOptions, 'baseDelayMs' | 'maxDelayMs'>> &
    ReconnectingSocketOptions;

  constructor(options: ReconnectingSocketOptions) {
    this.opts = { baseDelayMs: 500, maxDelayMs: 8000, ...options };
    this.open();
  }

  private open(): void {
    const factory = this.opts.factory ?? defaultFactory;
    const socket = factory(this.opts.url);
    this.socket = socket;
    socket.onopen = () => {
      this.attempt = 0;
      this.opts.onStateChange?.(true);
      this.opts.onConnect?.();
    };
    socket.onmessage = (ev) => {
      let parsed: Record<string, unknown>;
      try {
        parsed = JSON.parse(ev.data);
      } catch {
        return; // not a JSON frame; ignore
      }
      this.opts.onMessage(parsed);
    };
    socket.onclose = () => {
      this.opts.onStateChange?.(false);
      if (this.closed) return;
      const delay = Math.min(
        this.opts.baseDelayMs * 2 ** this.attempt,
        this.opts.maxDelayMs,
      );
      this.attempt += 1;
      setTimeout(() => {
        if (!this.closed) this.open();
      }, delay);
    };
  }

  send(message: Record<string, unknown>): void {
    this.socket?.send(JSON.stringify(message));
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }
}

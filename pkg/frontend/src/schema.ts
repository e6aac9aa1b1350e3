/**
 * Message schemas shared with the broker. Every frame carries `v: 1`;
 * unknown fields (and unknown frame types) are ignored on both sides.
 * This file is the single source of truth for the wire contract on the
 * client; the server mirrors the same shapes.
 */

export const SCHEMA_VERSION = 1;

// server -> worker
export interface TaskFrame {
  v: number;
  type: 'task';
  query_id: number;
  tokens: string[];
  highlight_index: number;
  labels: string[];
  deadline_seconds: number;
}

export interface JoinedFrame {
  v: number;
  type: 'joined';
  worker_id: string;
}

export interface ErrorFrame {
  v: number;
  type: 'error';
  reason: string;
}

// operator dashboard push
export interface RollingMetrics {
  f1_average: number;
  micro_accuracy: number;
  queries_per_token: number;
  curve: { episode_window: number; f1: number; qs_per_token: number; delay: number }[];
}

export interface DashboardFrame {
  v: number;
  type: 'dashboard';
  running: boolean;
  pool_size: number;
  queue_depth: number;
  episode: { index: number; id: string; total: number } | null;
  completed_episodes: number;
  duplicates: number;
  stale: number;
  cumulative_cost: number;
  payments: Record<string, number>;
  labels: string[];
  tokens: string[] | null;
  marginals: number[][] | null;
  rolling: RollingMetrics | null;
}

export type ServerFrame =
  | TaskFrame
  | JoinedFrame
  | ErrorFrame
  | DashboardFrame
  | { v: number; type: 'idle' | 'pong' | 'goodbye' | 'stale'; [key: string]: unknown };

// client -> server
export interface JoinMessage {
  v: number;
  type: 'join';
  worker_id?: string;
}

export interface AnswerMessage {
  v: number;
  type: 'answer';
  query_id: number;
  label: string;
}

export type ClientMessage =
  | JoinMessage
  | AnswerMessage
  | { v: number; type: 'ping' | 'goodbye' };

export function frame<T extends { type: string }>(body: T): T & { v: number } {
  return { v: SCHEMA_VERSION, ...body };
}

/**
 * Single-page app with two hash routes: #/worker (labeling console) and
 * #/operator (stream dashboard). The broker location and shared token come
 * from the query string: ?host=localhost:8400&token=...
 */

import { OperatorDashboard } from './operator.js';
import { WorkerConsole } from './worker.js';

function params(): { host: string; token: string } {
  const search = new URLSearchParams(window.location.search);
  return {
    host: search.get('host') ?? window.location.host,
    token: search.get('token') ?? 'otj-dev-token',
  };
}

function mount(): void {
  const root = document.getElementById('app');
  if (!root) return;
  const { host, token } = params();
  const route = window.location.hash || '#/worker';
  root.innerHTML = '';
  if (route.startsWith('#/operator')) {
    new OperatorDashboard({
      root,
      wsUrl: `ws://${host}/ws/operator?token=${token}`,
      apiBase: `http://${host}`,
      token,
    });
  } else {
    new WorkerConsole({ root, url: `ws://${host}/ws?token=${token}` });
  }
}

window.addEventListener('hashchange', mount);
mount();

import { ApiClient } from './api.js';
import { Dashboard } from './ui.js';

const params = new URLSearchParams(window.location.search);
const refreshMs = Number(params.get('refresh') ?? '5000');
const root = document.getElementById('app');
if (!root) throw new Error('missing #app mount point');

const dashboard = new Dashboard(new ApiClient(''), root);
void dashboard.start(Number.isFinite(refreshMs) ? refreshMs : 5000);

/**
 * Operator console: DOM wiring only. All behavior lives in the tested
 * modules (signer, messages, api, store, render); this file moves values
 * between them and the page.
 */

import { NodeApi } from "./api.js";
import { compositeId, buildMessage, policyDoc, validatePolicyForm, PolicyForm } from "./messages.js";
import { geofenceSvg, traceModel, verdictBadgeClass, violationSvg } from "./render.js";
import { SessionProfile, newSession, sessionFromJwk } from "./signer.js";
import { applyEvent, groupByRole, markOffline, markOnline, newState, noteTokoin } from "./store.js";

const $ = <T extends HTMLElement>(selector: string): T => {
  const el = document.querySelector(selector);
  if (!el) throw new Error(`missing element ${selector}`);
  return el as T;
};

const endpoint = localStorage.getItem("tokoin.endpoint") ?? window.location.origin;
let session: SessionProfile;
let api: NodeApi;
const state = { current: newState("") };

async function initSession(): Promise<void> {
  const saved = localStorage.getItem("tokoin.key");
  if (saved) {
    session = await sessionFromJwk(JSON.parse(saved), endpoint);
  } else {
    session = await newSession(endpoint);
    localStorage.setItem("tokoin.key", JSON.stringify(await session.exportKey()));
  }
  state.current = newState(session.pkHex);
  $("#who").textContent = `you are ${session.pkHex.slice(0, 16)}…`;
}

function renderGroups(): void {
  const groups = groupByRole(state.current);
  for (const [id, coins] of [
    ["#owned", groups.owned],
    ["#held", groups.held],
    ["#subject-of", groups.subjectOf],
  ] as const) {
    const el = $(id);
    el.innerHTML = "";
    for (const coin of coins) {
      const li = document.createElement("li");
      const link = document.createElement("a");
      link.href = `#trace/${coin.cid}`;
      link.textContent = `${coin.cid.slice(0, 20)}… (${coin.status})`;
      li.appendChild(link);
      el.appendChild(li);
    }
    if (!coins.length) el.innerHTML = "<li class='empty'>none</li>";
  }
  $("#offline-banner").style.display = state.current.offline ? "block" : "none";
}

async function submitSigned(msg: { [k: string]: any }): Promise<void> {
  const resp = await api.submit(msg);
  if (!resp.ok) {
    throw new Error(`${resp.code}${resp.detail ? `: ${resp.detail}` : ""}`);
  }
  const status = $("#form-status");
  status.textContent = `accepted ${resp.tx_hash!.slice(0, 16)}…, waiting for commit`;
  await api.waitCommit(resp.tx_hash!, Math.max(state.current.lastHeight, 0));
  status.textContent = `committed ${resp.tx_hash!.slice(0, 16)}…`;
}

async function nextNonce(): Promise<number> {
  const status = await api.status(session.pkHex);
  return (status.nonce ?? -1) + 1;
}

async function ensureRegistered(): Promise<void> {
  const status = await api.status(session.pkHex);
  if (status.registered) return;
  const msg = await buildMessage(session, await nextNonce(), {
    owner: session.pkHex,
    tId: 0,
    op: "register",
    reg: { kind: "participant" },
  });
  await submitSigned(msg);
}

function readPolicyForm(): PolicyForm {
  const value = (id: string) => ($(`#${id}`) as HTMLInputElement).value;
  return {
    groupN: value("f-group-n"),
    groupG: value("f-group-g"),
    groupValue: value("f-group-value"),
    resourceId: value("f-resource"),
    action: value("f-action"),
    startS: Number(value("f-start")),
    endS: Number(value("f-end")),
    lat: Number(value("f-lat")),
    lon: Number(value("f-lon")),
    radiusM: Number(value("f-radius")),
    actions: value("f-actions").split(",").map((s) => s.trim()).filter(Boolean),
    allowedRegion: value("f-region"),
    maxDurationS: Number(value("f-maxdur")),
    graceS: Number(value("f-grace")),
    uses: Number(value("f-uses")),
  };
}

async function onCreateOrModify(op: "create" | "modify"): Promise<void> {
  const errBox = $("#form-errors");
  errBox.innerHTML = "";
  const form = readPolicyForm();
  const errors = validatePolicyForm(form);
  if (errors.length) {
    // schema violations stay inline; nothing is sent
    errBox.innerHTML = errors.map((e) => `<li>${e.field}: ${e.message}</li>`).join("");
    return;
  }
  const tId = Number(($("#f-tid") as HTMLInputElement).value);
  const owner = op === "create" ? session.pkHex : (($("#f-owner") as HTMLInputElement).value || session.pkHex);
  try {
    await ensureRegistered();
    const msg = await buildMessage(session, await nextNonce(), {
      owner,
      tId,
      op,
      policy: policyDoc(form),
    });
    await submitSigned(msg);
    const cid = compositeId(owner, tId);
    noteTokoin(state.current, cid, await api.tokoin(cid));
    renderGroups();
  } catch (err) {
    errBox.innerHTML = `<li>ledger: ${(err as Error).message}</li>`;
  }
}

async function onTransfer(): Promise<void> {
  const cid = ($("#t-cid") as HTMLInputElement).value;
  const to = ($("#t-to") as HTMLInputElement).value;
  const [owner, tId] = [cid.slice(0, cid.lastIndexOf("-")), Number(cid.slice(cid.lastIndexOf("-") + 1))];
  const errBox = $("#form-errors");
  try {
    await ensureRegistered();
    const msg = await buildMessage(session, await nextNonce(), {
      owner,
      tId,
      op: "transfer",
      pkNext: to,
    });
    await submitSigned(msg);
  } catch (err) {
    errBox.innerHTML = `<li>ledger: ${(err as Error).message}</li>`;
  }
}

async function renderTrace(cid: string): Promise<void> {
  const container = $("#trace");
  const audit = await api.audit(cid);
  const model = traceModel(audit);
  if (!model.found) {
    container.innerHTML = `<p class="not-found">no such coin: ${cid}</p>`;
    return;
  }
  const rows = model.entries
    .map(
      (e) =>
        `<tr><td>${e.height}</td><td>${e.op}</td><td>${e.caller.slice(0, 12)}…</td>` +
        `<td>${e.summary}</td></tr>`,
    )
    .join("");
  let verdictHtml = "";
  let violationHtml = "";
  if (model.verdict) {
    verdictHtml = `<span class="badge ${verdictBadgeClass(model.verdict.outcome)}">${model.verdict.outcome}</span>`;
    if (model.verdict.violation) {
      violationHtml = `<figure>${violationSvg(model.verdict.violation)}<figcaption>recorded violation pattern</figcaption></figure>`;
    }
  }
  const coin = await api.tokoin(cid);
  const mapHtml = coin.tokoin ? geofenceSvg(coin.tokoin.policy, model.holders.length) : "";
  container.innerHTML = `
    <h3>${cid.slice(0, 24)}… ${verdictHtml}</h3>
    <div class="trace-grid">
      <table><thead><tr><th>height</th><th>op</th><th>caller</th><th>events</th></tr></thead>
      <tbody>${rows}</tbody></table>
      <div>${mapHtml}${violationHtml}</div>
    </div>`;
}

function route(): void {
  const hash = window.location.hash;
  $("#view-list").style.display = hash.startsWith("#trace/") ? "none" : "block";
  $("#view-trace").style.display = hash.startsWith("#trace/") ? "block" : "none";
  if (hash.startsWith("#trace/")) {
    renderTrace(hash.slice("#trace/".length)).catch(() => markOffline(state.current));
  }
}

async function main(): Promise<void> {
  await initSession();
  api = new NodeApi(endpoint);
  try {
    const status = await api.status();
    state.current.lastHeight = status.height ?? -1;
    markOnline(state.current);
  } catch {
    markOffline(state.current);
  }
  renderGroups();
  api.subscribe(
    0,
    (event) => {
      applyEvent(state.current, event);
      markOnline(state.current);
      renderGroups();
      if (window.location.hash === `#trace/${event.cid}`) {
        renderTrace(event.cid).catch(() => undefined);
      }
    },
    () => {
      markOffline(state.current);
      renderGroups();
    },
  );
  $("#btn-create").addEventListener("click", () => onCreateOrModify("create"));
  $("#btn-modify").addEventListener("click", () => onCreateOrModify("modify"));
  $("#btn-transfer").addEventListener("click", () => onTransfer());
  window.addEventListener("hashchange", route);
  route();
}

main().catch((err) => {
  document.body.insertAdjacentHTML(
    "afterbegin",
    `<div class="fatal">console failed to start: ${err}</div>`,
  );
});

/** Console bootstrap: wires the upload form, event channel and job cards. */

import { ApiClient, buildConfig, dropboxLocator } from "./api.js";
import { JobCard } from "./dom.js";
import { EventChannel } from "./events.js";
import { FUNCTIONALITIES } from "./protocol.js";
import { JobStore } from "./store.js";

const api = new ApiClient("");
const stores = new Map<string, JobStore>();

const channel = new EventChannel(
  `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/ws`,
  {
    onSession: (sessionId) => {
      statusLine.textContent = `connected · session ${sessionId.slice(0, 8)}`;
      submitButton.disabled = !formValid();
    },
    onEvent: (event) => {
      if (event.job_id) stores.get(event.job_id)?.apply(event);
    },
    onReplayNeeded: () => {
      for (const store of stores.values()) {
        if (!store.isTerminal) {
          api.getJob(store.jobId).then((status) => store.absorbStatus(status))
            .catch(() => undefined);
        }
      }
    },
  },
);

// --- form ------------------------------------------------------------------

const form = document.getElementById("submit-form") as HTMLFormElement;
const fileInput = document.getElementById("file-input") as HTMLInputElement;
const dropboxInput = document.getElementById("dropbox-path") as HTMLInputElement;
const funcSelect = document.getElementById("functionality") as HTMLSelectElement;
const paramsInput = document.getElementById("params") as HTMLInputElement;
const submitButton = document.getElementById("submit-button") as HTMLButtonElement;
const statusLine = document.getElementById("status-line") as HTMLElement;
const jobList = document.getElementById("jobs") as HTMLElement;

for (const name of FUNCTIONALITIES) {
  const option = document.createElement("option");
  option.value = name;
  option.textContent = name;
  funcSelect.append(option);
}

function formValid(): boolean {
  const hasImages = (fileInput.files?.length ?? 0) > 0
    || dropboxInput.value.trim().length > 0;
  return hasImages && channel.sessionId !== null;
}

function parseParams(text: string): Record<string, string> {
  const params: Record<string, string> = {};
  for (const piece of text.split(",")) {
    const [key, ...rest] = piece.split("=");
    if (key && key.trim() && rest.length > 0) {
      params[key.trim()] = rest.join("=").trim();
    }
  }
  return params;
}

fileInput.addEventListener("change", () => {
  submitButton.disabled = !formValid();
});
dropboxInput.addEventListener("input", () => {
  submitButton.disabled = !formValid();
});

form.addEventListener("submit", (evt) => {
  evt.preventDefault();
  if (!formValid() || channel.sessionId === null) return;
  const functionality = funcSelect.value;
  const files = Array.from(fileInput.files ?? []);
  const refs = dropboxInput.value.trim()
    ? [dropboxLocator(dropboxInput.value)]
    : [];
  const config = buildConfig(functionality, parseParams(paramsInput.value));
  submitButton.disabled = true;
  api.submitJob(channel.sessionId, { config, files, refs })
    .then((jobId) => {
      const store = new JobStore(jobId, functionality);
      stores.set(jobId, store);
      channel.track(jobId);
      const thumbnails = files.map((file) => URL.createObjectURL(file));
      const card = new JobCard(store, api, thumbnails);
      jobList.prepend(card.root);
      statusLine.textContent = `job ${jobId.slice(0, 8)} submitted`;
    })
    .catch((error) => {
      statusLine.textContent = `submit failed: ${error?.message ?? error}`;
    })
    .finally(() => {
      submitButton.disabled = !formValid();
    });
});

submitButton.disabled = true;
channel.connect();
